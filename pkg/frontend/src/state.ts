/** Pure session-view state: what the DOM renders is derived from this. */

import type { IterationResponse, MetricKey, Metrics } from "./api.js";
import { METRIC_KEYS, ApiError } from "./api.js";

export interface IterationView {
  index: number;
  metrics: Metrics;
  imageB64: string;
}

export interface SessionView {
  sessionId: string;
  description: string;
  modelKind: string;
  inputB64: string;
  iterations: IterationView[];
}

export function newSessionView(
  sessionId: string,
  description: string,
  modelKind: string,
  inputB64: string,
): SessionView {
  return { sessionId, description, modelKind, inputB64, iterations: [] };
}

export function pushIteration(view: SessionView, payload: IterationResponse): SessionView {
  const iteration: IterationView = {
    index: payload.iteration_index,
    metrics: payload.metrics,
    imageB64: payload.image_base64,
  };
  return { ...view, iterations: [...view.iterations, iteration] };
}

export function metricSeries(view: SessionView, key: MetricKey): Array<number | null> {
  return view.iterations.map((it) => it.metrics[key] ?? null);
}

export function allSeries(view: SessionView): Record<MetricKey, Array<number | null>> {
  const out = {} as Record<MetricKey, Array<number | null>>;
  for (const key of METRIC_KEYS) out[key] = metricSeries(view, key);
  return out;
}

function fieldErrors(payload: unknown): string | null {
  if (typeof payload !== "object" || payload === null) return null;
  const errors = (payload as { errors?: unknown }).errors;
  if (typeof errors !== "object" || errors === null) return null;
  const parts = Object.entries(errors as Record<string, unknown>).map(
    ([field, message]) => `${field}: ${String(message)}`,
  );
  return parts.length ? parts.join("; ") : null;
}

/** One human-readable line for the error banner. */
export function describeError(error: unknown): string {
  if (!(error instanceof ApiError)) {
    return error instanceof Error ? `request failed: ${error.message}` : "request failed";
  }
  const detail =
    typeof error.payload === "object" && error.payload !== null
      ? (error.payload as { detail?: unknown }).detail
      : undefined;
  switch (error.status) {
    case 422:
      return `the text and image embeddings cannot be combined${
        detail ? `: ${String(detail)}` : ""
      }; try different feedback or strength`;
    case 404:
      return "session not found on the server (it may have been evicted)";
    case 400:
      return fieldErrors(error.payload) ?? "the server rejected the request body";
    default:
      return `request failed with status ${error.status}`;
  }
}
