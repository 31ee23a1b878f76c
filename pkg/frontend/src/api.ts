/** Typed client for the session service; the UI's only contact with it. */

export const METRIC_KEYS = ["ssim", "psnr", "clip_score", "perceptual_distance"] as const;
export type MetricKey = (typeof METRIC_KEYS)[number];
export type Metrics = Record<MetricKey, number | null>;

export interface CreateRequest {
  description: string;
  image_base64: string;
  model_kind: "model1" | "model2" | "model3";
  strength?: number;
  guidance_scale?: number;
  seed?: number;
}

export interface CreateResponse {
  session_id: string;
}

export interface IterationRequest {
  feedback_text?: string;
  strength?: number;
  guidance_scale?: number;
}

export interface IterationResponse {
  iteration_index: number;
  metrics: Metrics;
  image_base64: string;
}

export interface SessionSummary {
  session_id: string;
  description: string;
  model_kind: string;
  iteration_count: number;
  feedback: string[];
  prompts: string[];
  metrics: Record<MetricKey, Array<number | null>>;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly payload: unknown,
  ) {
    super(`request failed with status ${status}`);
    this.name = "ApiError";
  }
}

async function requestJson<T>(url: string, init?: RequestInit): Promise<T> {
  const response = await fetch(url, init);
  let payload: unknown = null;
  const text = await response.text();
  if (text) {
    try {
      payload = JSON.parse(text);
    } catch {
      payload = text;
    }
  }
  if (!response.ok) throw new ApiError(response.status, payload);
  return payload as T;
}

function post<T>(url: string, body: unknown): Promise<T> {
  return requestJson<T>(url, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(body),
  });
}

export interface ApiClient {
  createSession(body: CreateRequest): Promise<CreateResponse>;
  runIteration(sessionId: string, body: IterationRequest): Promise<IterationResponse>;
  getSummary(sessionId: string): Promise<SessionSummary>;
  deleteSession(sessionId: string): Promise<void>;
}

export function makeApi(baseUrl = ""): ApiClient {
  return {
    createSession: (body) => post(`${baseUrl}/v1/sessions`, body),
    runIteration: (sessionId, body) =>
      post(`${baseUrl}/v1/sessions/${encodeURIComponent(sessionId)}/iterations`, body),
    getSummary: (sessionId) =>
      requestJson(`${baseUrl}/v1/sessions/${encodeURIComponent(sessionId)}`),
    deleteSession: async (sessionId) => {
      const response = await fetch(
        `${baseUrl}/v1/sessions/${encodeURIComponent(sessionId)}`,
        { method: "DELETE" },
      );
      if (!response.ok) {
        let payload: unknown = null;
        try {
          payload = await response.json();
        } catch {
          payload = null;
        }
        throw new ApiError(response.status, payload);
      }
    },
  };
}
