/** Binary PGM (P5, 8-bit) parsing and encoding, plus base64 helpers.
 *
 * The service speaks PGM on both sides: session inputs are uploaded as
 * base64-encoded PGM and every iteration frame comes back the same way.
 * Browsers cannot render PGM natively, so the UI decodes to raw pixels
 * and paints canvases itself.
 */

export interface Pgm {
  width: number;
  height: number;
  /** row-major, one byte per pixel */
  pixels: Uint8Array;
}

const WHITESPACE = new Set([0x20, 0x09, 0x0a, 0x0d, 0x0b, 0x0c]);

function headerTokens(bytes: Uint8Array, count: number): { tokens: string[]; offset: number } {
  const tokens: string[] = [];
  let i = 0;
  while (tokens.length < count) {
    while (i < bytes.length && WHITESPACE.has(bytes[i]!)) i++;
    if (i < bytes.length && bytes[i] === 0x23) {
      // comment runs to end of line
      while (i < bytes.length && bytes[i] !== 0x0a) i++;
      continue;
    }
    if (i >= bytes.length) throw new Error("truncated PGM header");
    let start = i;
    while (i < bytes.length && !WHITESPACE.has(bytes[i]!) && bytes[i] !== 0x23) i++;
    tokens.push(String.fromCharCode(...bytes.subarray(start, i)));
  }
  // exactly one whitespace byte separates the header from the raster
  if (i >= bytes.length || !WHITESPACE.has(bytes[i]!)) {
    throw new Error("truncated PGM header");
  }
  return { tokens, offset: i + 1 };
}

export function parsePgm(bytes: Uint8Array): Pgm {
  if (bytes.length < 2 || bytes[0] !== 0x50 || bytes[1] !== 0x35) {
    throw new Error("not a binary PGM (missing P5 magic)");
  }
  const { tokens, offset } = headerTokens(bytes.subarray(2), 3);
  const [w, h, maxval] = tokens.map((t) => {
    const n = Number(t);
    if (!Number.isInteger(n)) throw new Error(`bad PGM header token ${JSON.stringify(t)}`);
    return n;
  }) as [number, number, number];
  if (w <= 0 || h <= 0) throw new Error(`bad PGM dimensions ${w}x${h}`);
  if (maxval !== 255) throw new Error(`unsupported PGM maxval ${maxval} (need 255)`);
  const raster = bytes.subarray(2 + offset, 2 + offset + w * h);
  if (raster.length < w * h) throw new Error("truncated PGM raster");
  return { width: w, height: h, pixels: new Uint8Array(raster) };
}

export function encodePgm(pgm: Pgm): Uint8Array {
  if (pgm.pixels.length !== pgm.width * pgm.height) {
    throw new Error("pixel count does not match dimensions");
  }
  const header = `P5\n${pgm.width} ${pgm.height}\n255\n`;
  const out = new Uint8Array(header.length + pgm.pixels.length);
  for (let i = 0; i < header.length; i++) out[i] = header.charCodeAt(i);
  out.set(pgm.pixels, header.length);
  return out;
}

export function bytesToBase64(bytes: Uint8Array): string {
  let binary = "";
  const chunk = 0x8000;
  for (let i = 0; i < bytes.length; i += chunk) {
    binary += String.fromCharCode(...bytes.subarray(i, i + chunk));
  }
  return btoa(binary);
}

export function base64ToBytes(b64: string): Uint8Array {
  const binary = atob(b64);
  const out = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) out[i] = binary.charCodeAt(i);
  return out;
}

export function parsePgmBase64(b64: string): Pgm {
  return parsePgm(base64ToBytes(b64));
}

/** Deterministic striped test sketch so the UI works without a file on hand. */
export function makeDemoSketch(size = 32, seed = 0): Pgm {
  let state = (seed >>> 0) || 0x9e3779b9;
  const next = () => {
    // mulberry32
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
  const pixels = new Uint8Array(size * size);
  for (let y = 0; y < size; y++) {
    for (let x = 0; x < size; x++) {
      const stripe = Math.sin(((x + 2 * y) / size) * Math.PI * 4) > 0 ? 200 : 60;
      const noise = Math.floor(next() * 40) - 20;
      pixels[y * size + x] = Math.max(0, Math.min(255, stripe + noise));
    }
  }
  return { width: size, height: size, pixels };
}
