import { afterEach, describe, expect, it, vi } from "vitest";

import { ApiError, makeApi } from "../src/api.js";

interface Call {
  url: string;
  init?: RequestInit;
}

function stubFetch(status: number, body: string, calls: Call[]): void {
  vi.stubGlobal(
    "fetch",
    vi.fn(async (url: string, init?: RequestInit): Promise<Response> => {
      calls.push({ url, init });
      return new Response(body === "" ? null : body, {
        status,
        headers: { "Content-Type": "application/json" },
      });
    }),
  );
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe("makeApi", () => {
  it("creates a session with a JSON POST to /v1/sessions", async () => {
    const calls: Call[] = [];
    stubFetch(201, '{"session_id": "abc"}', calls);
    const api = makeApi();
    const created = await api.createSession({
      description: "a face",
      image_base64: "AAAA",
      model_kind: "model2",
      strength: 0.3,
      seed: 7,
    });
    expect(created.session_id).toBe("abc");
    expect(calls).toHaveLength(1);
    expect(calls[0]!.url).toBe("/v1/sessions");
    expect(calls[0]!.init?.method).toBe("POST");
    const sent = JSON.parse(String(calls[0]!.init?.body));
    expect(sent.model_kind).toBe("model2");
    expect(sent.seed).toBe(7);
  });

  it("runs an iteration against the session's iterations route", async () => {
    const calls: Call[] = [];
    stubFetch(
      200,
      '{"iteration_index": 1, "metrics": {"ssim": null, "psnr": 20, "clip_score": 0.5, "perceptual_distance": 1.0}, "image_base64": "BBBB"}',
      calls,
    );
    const api = makeApi("http://host");
    const payload = await api.runIteration("sid x", { feedback_text: "darker" });
    expect(payload.iteration_index).toBe(1);
    expect(payload.metrics.ssim).toBeNull();
    expect(calls[0]!.url).toBe("http://host/v1/sessions/sid%20x/iterations");
    expect(JSON.parse(String(calls[0]!.init?.body))).toEqual({ feedback_text: "darker" });
  });

  it("throws ApiError with the parsed payload on a 4xx", async () => {
    const calls: Call[] = [];
    stubFetch(422, '{"error": "degenerate_combination", "detail": "why"}', calls);
    const api = makeApi();
    const failure = await api
      .runIteration("sid", {})
      .then(() => null)
      .catch((e: unknown) => e);
    expect(failure).toBeInstanceOf(ApiError);
    const err = failure as ApiError;
    expect(err.status).toBe(422);
    expect(err.payload).toEqual({ error: "degenerate_combination", detail: "why" });
  });

  it("keeps a non-JSON error body as raw text", async () => {
    const calls: Call[] = [];
    stubFetch(500, "exploded", calls);
    const api = makeApi();
    const failure = await api.getSummary("sid").catch((e: unknown) => e as ApiError);
    expect(failure).toBeInstanceOf(ApiError);
    expect((failure as ApiError).payload).toBe("exploded");
  });

  it("fetches the session summary with a plain GET", async () => {
    const calls: Call[] = [];
    stubFetch(
      200,
      '{"session_id": "sid", "description": "a face", "model_kind": "model2", "iteration_count": 0, "feedback": [], "prompts": [], "metrics": {"ssim": [], "psnr": [], "clip_score": [], "perceptual_distance": []}}',
      calls,
    );
    const summary = await makeApi().getSummary("sid");
    expect(summary.iteration_count).toBe(0);
    expect(calls[0]!.url).toBe("/v1/sessions/sid");
    expect(calls[0]!.init?.method).toBeUndefined();
  });

  it("treats an empty 204 as a successful delete", async () => {
    const calls: Call[] = [];
    stubFetch(204, "", calls);
    await expect(makeApi().deleteSession("sid")).resolves.toBeUndefined();
    expect(calls[0]!.init?.method).toBe("DELETE");
  });

  it("raises on deleting a session that is already gone", async () => {
    const calls: Call[] = [];
    stubFetch(404, '{"error": "not_found", "detail": "no session"}', calls);
    const failure = await makeApi()
      .deleteSession("sid")
      .catch((e: unknown) => e as ApiError);
    expect(failure).toBeInstanceOf(ApiError);
    expect((failure as ApiError).status).toBe(404);
  });
});
