import { describe, expect, it } from "vitest";

import { ApiError } from "../src/api.js";
import type { IterationResponse } from "../src/api.js";
import {
  allSeries,
  describeError,
  metricSeries,
  newSessionView,
  pushIteration,
} from "../src/state.js";

function iteration(index: number, ssim: number | null): IterationResponse {
  return {
    iteration_index: index,
    metrics: { ssim, psnr: 20 + index, clip_score: 0.5, perceptual_distance: 1.0 },
    image_base64: `img${index}`,
  };
}

describe("session view", () => {
  it("starts empty and appends iterations without mutating the old view", () => {
    const v0 = newSessionView("sid", "a face", "model2", "input64");
    const v1 = pushIteration(v0, iteration(1, 0.5));
    const v2 = pushIteration(v1, iteration(2, 0.7));
    expect(v0.iterations).toHaveLength(0);
    expect(v1.iterations).toHaveLength(1);
    expect(v2.iterations).toHaveLength(2);
    expect(v2.sessionId).toBe("sid");
    expect(v2.iterations[1]).toMatchObject({ index: 2, imageB64: "img2" });
  });

  it("extracts metric series, preserving nulls in place", () => {
    let view = newSessionView("sid", "a face", "model2", "input64");
    view = pushIteration(view, iteration(1, 0.5));
    view = pushIteration(view, iteration(2, null));
    view = pushIteration(view, iteration(3, 0.9));
    expect(metricSeries(view, "ssim")).toEqual([0.5, null, 0.9]);
    expect(metricSeries(view, "psnr")).toEqual([21, 22, 23]);
    const series = allSeries(view);
    expect(Object.keys(series).sort()).toEqual([
      "clip_score",
      "perceptual_distance",
      "psnr",
      "ssim",
    ]);
    expect(series.ssim).toHaveLength(3);
  });
});

describe("describeError", () => {
  it("explains a degenerate-combination rejection with its detail", () => {
    const err = new ApiError(422, {
      error: "degenerate_combination",
      detail: "strength 1.0 erases the input",
    });
    const text = describeError(err);
    expect(text).toContain("cannot be combined");
    expect(text).toContain("strength 1.0 erases the input");
    expect(text).toContain("try different feedback or strength");
  });

  it("still explains a 422 without a detail payload", () => {
    const text = describeError(new ApiError(422, null));
    expect(text).toContain("cannot be combined");
  });

  it("lists field errors from a 400 response", () => {
    const err = new ApiError(400, {
      errors: { feedback: "unknown field", strength: "must be in [0, 1]" },
    });
    const text = describeError(err);
    expect(text).toContain("feedback: unknown field");
    expect(text).toContain("strength: must be in [0, 1]");
  });

  it("falls back to a generic line for a 400 with no errors map", () => {
    expect(describeError(new ApiError(400, "nope"))).toBe(
      "the server rejected the request body",
    );
  });

  it("describes a missing session", () => {
    const text = describeError(new ApiError(404, { error: "not_found" }));
    expect(text).toContain("session not found");
  });

  it("reports other statuses and plain errors sensibly", () => {
    expect(describeError(new ApiError(503, null))).toBe(
      "request failed with status 503",
    );
    expect(describeError(new Error("network down"))).toBe("request failed: network down");
    expect(describeError("weird")).toBe("request failed");
  });
});
