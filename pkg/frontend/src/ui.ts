/** DOM wiring: one session panel driven by the typed API client.
 *
 * All state lives in a SessionView; every handler re-renders from it, so a
 * failed request (banner shown) leaves the thumbnails, sparklines, and the
 * session itself exactly as they were.
 */

import type { ApiClient, IterationRequest, MetricKey } from "./api.js";
import { METRIC_KEYS } from "./api.js";
import type { Pgm } from "./pgm.js";
import { makeDemoSketch, parsePgm, parsePgmBase64, bytesToBase64, encodePgm } from "./pgm.js";
import { formatMetric, sparklineSvg } from "./sparkline.js";
import type { SessionView } from "./state.js";
import { describeError, metricSeries, newSessionView, pushIteration } from "./state.js";

const METRIC_LABELS: Record<MetricKey, string> = {
  ssim: "SSIM vs previous",
  psnr: "PSNR vs previous",
  clip_score: "CLIP score",
  perceptual_distance: "perceptual distance",
};

export function paintPgm(canvas: HTMLCanvasElement, pgm: Pgm): void {
  canvas.width = pgm.width;
  canvas.height = pgm.height;
  const ctx = canvas.getContext("2d");
  if (!ctx) return; // canvas 2d is unavailable under jsdom
  const image = ctx.createImageData(pgm.width, pgm.height);
  for (let i = 0; i < pgm.pixels.length; i++) {
    const v = pgm.pixels[i]!;
    image.data[i * 4] = v;
    image.data[i * 4 + 1] = v;
    image.data[i * 4 + 2] = v;
    image.data[i * 4 + 3] = 255;
  }
  ctx.putImageData(image, 0, 0);
}

function thumb(doc: Document, pgm: Pgm, caption: string): HTMLElement {
  const figure = doc.createElement("figure");
  figure.dataset.role = "thumb";
  const canvas = doc.createElement("canvas");
  canvas.className = "pixel";
  paintPgm(canvas, pgm);
  const label = doc.createElement("figcaption");
  label.textContent = caption;
  figure.append(canvas, label);
  return figure;
}

export function renderThumbnails(container: HTMLElement, view: SessionView): void {
  const doc = container.ownerDocument;
  container.replaceChildren();
  container.append(thumb(doc, parsePgmBase64(view.inputB64), "input"));
  for (const it of view.iterations) {
    container.append(thumb(doc, parsePgmBase64(it.imageB64), `iter ${it.index}`));
  }
}

export function renderMetrics(container: HTMLElement, view: SessionView): void {
  const doc = container.ownerDocument;
  container.replaceChildren();
  for (const key of METRIC_KEYS) {
    const series = metricSeries(view, key);
    const card = doc.createElement("div");
    card.className = "metric-card";
    card.dataset.metric = key;
    const name = doc.createElement("h3");
    name.textContent = METRIC_LABELS[key];
    const value = doc.createElement("span");
    value.className = "metric-value";
    value.textContent = formatMetric(series[series.length - 1]);
    const spark = doc.createElement("div");
    spark.className = "spark";
    spark.dataset.points = String(series.length);
    spark.innerHTML = sparklineSvg(series);
    card.append(name, value, spark);
    container.append(card);
  }
}

function requireElement<T extends Element>(doc: Document, selector: string): T {
  const el = doc.querySelector<T>(selector);
  if (!el) throw new Error(`missing element ${selector}`);
  return el;
}

export interface App {
  /** Resolves once the handler kicked off by the last click settles. */
  whenIdle(): Promise<void>;
}

export function initApp(doc: Document, api: ApiClient): App {
  const description = requireElement<HTMLTextAreaElement>(doc, "#description");
  const fileInput = requireElement<HTMLInputElement>(doc, "#pgm-file");
  const demoBtn = requireElement<HTMLButtonElement>(doc, "#demo-btn");
  const preview = requireElement<HTMLCanvasElement>(doc, "#input-preview");
  const modelKind = requireElement<HTMLSelectElement>(doc, "#model-kind");
  const strength = requireElement<HTMLInputElement>(doc, "#strength");
  const guidance = requireElement<HTMLInputElement>(doc, "#guidance");
  const seed = requireElement<HTMLInputElement>(doc, "#seed");
  const startBtn = requireElement<HTMLButtonElement>(doc, "#start-btn");
  const sessionPanel = requireElement<HTMLElement>(doc, "#session-panel");
  const sessionIdLabel = requireElement<HTMLElement>(doc, "#session-id");
  const thumbs = requireElement<HTMLElement>(doc, "#thumbs");
  const metrics = requireElement<HTMLElement>(doc, "#metrics");
  const feedback = requireElement<HTMLInputElement>(doc, "#feedback");
  const refineBtn = requireElement<HTMLButtonElement>(doc, "#refine-btn");
  const endBtn = requireElement<HTMLButtonElement>(doc, "#end-btn");
  const banner = requireElement<HTMLElement>(doc, "#banner");

  let inputPgm: Pgm | null = null;
  let view: SessionView | null = null;
  let inFlight = false;
  let lastOp: Promise<void> = Promise.resolve();

  function showBanner(message: string): void {
    banner.textContent = message;
    banner.classList.remove("hidden");
  }

  function clearBanner(): void {
    banner.textContent = "";
    banner.classList.add("hidden");
  }

  function syncControls(): void {
    startBtn.disabled = inFlight;
    refineBtn.disabled = inFlight || view === null;
    endBtn.disabled = inFlight || view === null;
  }

  function render(): void {
    if (!view) {
      sessionPanel.classList.add("hidden");
      return;
    }
    sessionPanel.classList.remove("hidden");
    sessionIdLabel.textContent = view.sessionId;
    renderThumbnails(thumbs, view);
    renderMetrics(metrics, view);
  }

  function setInput(pgm: Pgm): void {
    inputPgm = pgm;
    preview.classList.remove("hidden");
    paintPgm(preview, pgm);
  }

  async function run(op: () => Promise<void>): Promise<void> {
    if (inFlight) return;
    inFlight = true;
    syncControls();
    try {
      await op();
      clearBanner();
    } catch (error) {
      showBanner(describeError(error));
    } finally {
      inFlight = false;
      syncControls();
      render();
    }
  }

  demoBtn.addEventListener("click", () => {
    setInput(makeDemoSketch(32, Number(seed.value) || 0));
  });

  fileInput.addEventListener("change", () => {
    const file = fileInput.files?.[0];
    if (!file) return;
    lastOp = (async () => {
      try {
        setInput(parsePgm(new Uint8Array(await file.arrayBuffer())));
        clearBanner();
      } catch (error) {
        showBanner(error instanceof Error ? error.message : "could not read that file");
      }
    })();
  });

  startBtn.addEventListener("click", () => {
    lastOp = run(async () => {
      if (!description.value.trim()) throw new Error("enter a description first");
      if (!inputPgm) throw new Error("choose a PGM file or generate a test sketch first");
      const inputB64 = bytesToBase64(encodePgm(inputPgm));
      const created = await api.createSession({
        description: description.value.trim(),
        image_base64: inputB64,
        model_kind: modelKind.value as "model1" | "model2" | "model3",
        strength: Number(strength.value),
        guidance_scale: Number(guidance.value),
        seed: Math.trunc(Number(seed.value)) || 0,
      });
      view = newSessionView(
        created.session_id,
        description.value.trim(),
        modelKind.value,
        inputB64,
      );
    });
  });

  refineBtn.addEventListener("click", () => {
    lastOp = run(async () => {
      if (!view) return;
      const body: IterationRequest = {
        strength: Number(strength.value),
        guidance_scale: Number(guidance.value),
      };
      if (feedback.value.trim()) body.feedback_text = feedback.value.trim();
      const payload = await api.runIteration(view.sessionId, body);
      view = pushIteration(view, payload);
      feedback.value = "";
    });
  });

  endBtn.addEventListener("click", () => {
    lastOp = run(async () => {
      if (!view) return;
      await api.deleteSession(view.sessionId);
      view = null;
    });
  });

  syncControls();
  return { whenIdle: () => lastOp };
}
