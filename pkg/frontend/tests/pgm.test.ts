import { describe, expect, it } from "vitest";

import {
  base64ToBytes,
  bytesToBase64,
  encodePgm,
  makeDemoSketch,
  parsePgm,
  parsePgmBase64,
} from "../src/pgm.js";

const encoder = new TextEncoder();

function pgmBytes(header: string, raster: number[]): Uint8Array {
  const head = encoder.encode(header);
  const out = new Uint8Array(head.length + raster.length);
  out.set(head);
  out.set(raster, head.length);
  return out;
}

describe("parsePgm", () => {
  it("reads a minimal binary PGM", () => {
    const pgm = parsePgm(pgmBytes("P5\n2 3\n255\n", [0, 50, 100, 150, 200, 250]));
    expect(pgm.width).toBe(2);
    expect(pgm.height).toBe(3);
    expect(Array.from(pgm.pixels)).toEqual([0, 50, 100, 150, 200, 250]);
  });

  it("tolerates comments and unusual whitespace in the header", () => {
    const pgm = parsePgm(
      pgmBytes("P5 # magic\n# a comment line\n  2\t2 # dims\n255\n", [1, 2, 3, 4]),
    );
    expect(pgm.width).toBe(2);
    expect(pgm.height).toBe(2);
    expect(Array.from(pgm.pixels)).toEqual([1, 2, 3, 4]);
  });

  it("rejects other formats", () => {
    const ascii = encoder.encode("P2\n2 2\n255\n1 2 3 4\n");
    expect(() => parsePgm(ascii)).toThrow(/P5/);
  });

  it("rejects maxval other than 255", () => {
    expect(() => parsePgm(pgmBytes("P5\n2 2\n65535\n", [0, 0, 0, 0]))).toThrow(/maxval/);
  });

  it("rejects a short raster", () => {
    expect(() => parsePgm(pgmBytes("P5\n2 2\n255\n", [0, 0, 0]))).toThrow(/truncated/);
  });

  it("rejects malformed header tokens", () => {
    expect(() => parsePgm(pgmBytes("P5\ntwo 2\n255\n", [0, 0, 0, 0]))).toThrow(/header/);
  });
});

describe("encodePgm", () => {
  it("roundtrips through parsePgm bit for bit", () => {
    const original = makeDemoSketch(16, 4);
    const again = parsePgm(encodePgm(original));
    expect(again.width).toBe(16);
    expect(again.height).toBe(16);
    expect(again.pixels).toEqual(original.pixels);
  });

  it("refuses a pixel buffer that disagrees with the dimensions", () => {
    expect(() =>
      encodePgm({ width: 4, height: 4, pixels: new Uint8Array(3) }),
    ).toThrow(/does not match/);
  });
});

describe("base64 helpers", () => {
  it("roundtrips arbitrary bytes, including a full PGM", () => {
    const bytes = encodePgm(makeDemoSketch(8, 9));
    expect(base64ToBytes(bytesToBase64(bytes))).toEqual(bytes);
    expect(parsePgmBase64(bytesToBase64(bytes)).width).toBe(8);
  });

  it("handles buffers longer than one btoa chunk", () => {
    const big = new Uint8Array(100_000);
    for (let i = 0; i < big.length; i++) big[i] = i % 251;
    expect(base64ToBytes(bytesToBase64(big))).toEqual(big);
  });
});

describe("makeDemoSketch", () => {
  it("is deterministic per seed and stays within byte range", () => {
    const a = makeDemoSketch(32, 7);
    const b = makeDemoSketch(32, 7);
    const c = makeDemoSketch(32, 8);
    expect(a.pixels).toEqual(b.pixels);
    expect(a.pixels).not.toEqual(c.pixels);
    expect(a.pixels.length).toBe(32 * 32);
    let min = 255;
    let max = 0;
    for (const v of a.pixels) {
      min = Math.min(min, v);
      max = Math.max(max, v);
    }
    expect(min).toBeGreaterThanOrEqual(0);
    expect(max).toBeLessThanOrEqual(255);
    expect(max - min).toBeGreaterThan(50); // stripes should actually show up
  });
});
