// DOM wiring: all logic lives in api/rle/overlay/state; this file only
// moves bytes between them and the canvas/panels.

import { ApiClient, ServerError } from "./api.js";
import { decodeRle } from "./rle.js";
import { overlayPixels, splitPixels, upscaleNearest } from "./overlay.js";
import {
  ViewState,
  activePrediction,
  formatDelta,
  initialState,
  selectEntry,
  toggleCompare,
  withIntervention,
  withParseError,
  withSample,
} from "./state.js";

const api = new ApiClient("");
let state: ViewState = initialState();
let imageSize = 64;
const SCALE = 6;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function canvasCtx(id: string): CanvasRenderingContext2D {
  const canvas = el<HTMLCanvasElement>(id);
  canvas.width = imageSize * SCALE;
  canvas.height = imageSize * SCALE;
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("no 2d context");
  ctx.imageSmoothingEnabled = false;
  return ctx;
}

async function drawImageLayer(): Promise<void> {
  if (!state.imagePng) return;
  const ctx = canvasCtx("image-canvas");
  const img = new Image();
  await new Promise<void>((resolve, reject) => {
    img.onload = () => resolve();
    img.onerror = () => reject(new Error("image decode failed"));
    img.src = `data:image/png;base64,${state.imagePng}`;
  });
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  ctx.drawImage(img, 0, 0, ctx.canvas.width, ctx.canvas.height);
}

function blit(ctx: CanvasRenderingContext2D, rgba: Uint8ClampedArray): void {
  const copy = new Uint8ClampedArray(rgba.length);
  copy.set(rgba);
  ctx.putImageData(new ImageData(copy, imageSize * SCALE, imageSize * SCALE), 0, 0);
}

function drawOverlays(): void {
  const ctx = canvasCtx("overlay-canvas");
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  const pred = activePrediction(state);
  if (!pred) return;
  const predPixels = overlayPixels(decodeRle(pred), state.overlayOpacity);
  let composed = predPixels;
  if (state.compareMode && state.basePrediction && state.selectedEntry !== null) {
    const basePixels = overlayPixels(decodeRle(state.basePrediction), state.overlayOpacity);
    composed = splitPixels(basePixels, predPixels, imageSize, state.compareSplit);
  }
  if (state.showGroundTruth && state.groundTruth) {
    // ground truth drawn at low alpha underneath the prediction layer
    const gt = overlayPixels(decodeRle(state.groundTruth), state.overlayOpacity * 0.5);
    blit(ctx, upscaleNearest(gt, imageSize, SCALE));
    const tmp = canvasCtx("overlay-canvas-pred");
    blit(tmp, upscaleNearest(composed, imageSize, SCALE));
    ctx.drawImage(tmp.canvas, 0, 0);
    return;
  }
  blit(ctx, upscaleNearest(composed, imageSize, SCALE));
}

function renderPanels(): void {
  el("snapshot-hash").textContent = state.snapshotHash ?? "-";
  el("base-dice").textContent =
    state.baseDice === null ? "n/a" : state.baseDice.toFixed(3);
  const err = el("inline-error");
  if (state.inlineError) {
    const pos = state.inlineError.position;
    err.textContent =
      pos === null
        ? state.inlineError.message
        : `${state.inlineError.message} (at position ${pos})`;
    err.style.display = "block";
  } else {
    err.style.display = "none";
  }
  const list = el("history-list");
  list.innerHTML = "";
  state.history.forEach((entry, i) => {
    const li = document.createElement("li");
    const badge = formatDelta(entry.delta);
    li.textContent = `${entry.command} — Δdice ${badge}`;
    li.className = state.selectedEntry === i ? "selected" : "";
    li.onclick = () => {
      state = selectEntry(state, i);
      render();
    };
    list.appendChild(li);
  });
  el("compare-note").textContent = state.compareMode
    ? "split view: base | selected"
    : "";
}

function render(): void {
  renderPanels();
  drawOverlays();
}

async function loadSample(): Promise<void> {
  try {
    const sample = await api.sample(
      state.domain,
      state.index,
      state.corruption ?? undefined,
    );
    const segment = await api.segment(sample.sample_id);
    state = withSample(state, sample, segment);
    await drawImageLayer();
    render();
  } catch (err) {
    showBanner(err);
  }
}

async function submitCommand(): Promise<void> {
  const input = el<HTMLInputElement>("command-input");
  const text = input.value.trim();
  if (!text || !state.sessionId) return;
  const button = el<HTMLButtonElement>("command-submit");
  button.disabled = true; // no pipelined interventions
  try {
    const response = await api.intervene(state.sessionId, text);
    state = withIntervention(state, text, response);
    input.value = "";
    render();
  } catch (err) {
    if (err instanceof ServerError && err.detail.code === "parse_error") {
      state = withParseError(state, err.detail.message, err.detail.position ?? null);
      render();
    } else {
      showBanner(err);
    }
  } finally {
    button.disabled = false;
  }
}

function showBanner(err: unknown): void {
  const banner = el("error-banner");
  banner.textContent = err instanceof Error ? err.message : String(err);
  banner.style.display = "block";
  el("error-dismiss").onclick = () => {
    banner.style.display = "none";
  };
}

export async function boot(): Promise<void> {
  const info = await api.modelInfo();
  imageSize = info.image_size;
  el("grammar-help").textContent = info.grammar_help;
  el("snapshot-hash").textContent = info.snapshot_hash;

  el<HTMLSelectElement>("domain-select").onchange = (e) => {
    state = { ...initialState(), domain: (e.target as HTMLSelectElement).value };
    void loadSample();
  };
  el<HTMLSelectElement>("corruption-select").onchange = (e) => {
    const value = (e.target as HTMLSelectElement).value;
    state = { ...state, corruption: value === "none" ? null : value };
    void loadSample();
  };
  el<HTMLInputElement>("index-input").onchange = (e) => {
    state = { ...state, index: Number((e.target as HTMLInputElement).value) };
    void loadSample();
  };
  el<HTMLInputElement>("opacity-slider").oninput = (e) => {
    state = { ...state, overlayOpacity: Number((e.target as HTMLInputElement).value) };
    drawOverlays();
  };
  el<HTMLInputElement>("gt-toggle").onchange = (e) => {
    state = { ...state, showGroundTruth: (e.target as HTMLInputElement).checked };
    drawOverlays();
  };
  el<HTMLButtonElement>("command-submit").onclick = () => void submitCommand();
  el<HTMLInputElement>("command-input").onkeydown = (e) => {
    if (e.key === "Enter") void submitCommand();
  };
  el<HTMLButtonElement>("compare-toggle").onclick = () => {
    state = toggleCompare(state);
    render();
  };
  el<HTMLInputElement>("split-slider").oninput = (e) => {
    state = { ...state, compareSplit: Number((e.target as HTMLInputElement).value) };
    drawOverlays(); // pure client state: no refetch
  };
  el<HTMLButtonElement>("base-select").onclick = () => {
    state = selectEntry(state, null);
    render();
  };
  await loadSample();
}

if (typeof document !== "undefined" && document.getElementById("app-root")) {
  void boot();
}
