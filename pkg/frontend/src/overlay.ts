// Pure pixel composition: label maps -> RGBA buffers. Kept DOM-free so the
// render math is unit-testable; a thin canvas blit lives in app.ts.

export interface Rgba {
  r: number;
  g: number;
  b: number;
}

// class 0 (background) stays transparent
export const CLASS_COLORS: Rgba[] = [
  { r: 0, g: 0, b: 0 },
  { r: 239, g: 83, b: 80 },
  { r: 102, g: 187, b: 106 },
  { r: 66, g: 165, b: 245 },
  { r: 255, g: 202, b: 40 },
  { r: 171, g: 71, b: 188 },
];

export function overlayPixels(
  labels: Uint8Array,
  opacity: number,
): Uint8ClampedArray {
  if (opacity < 0 || opacity > 1) throw new Error("opacity must be in [0,1]");
  const out = new Uint8ClampedArray(labels.length * 4);
  const alpha = Math.round(opacity * 255);
  for (let i = 0; i < labels.length; i++) {
    const cls = labels[i];
    if (cls === 0) continue; // transparent background
    const color = CLASS_COLORS[cls % CLASS_COLORS.length];
    out[4 * i] = color.r;
    out[4 * i + 1] = color.g;
    out[4 * i + 2] = color.b;
    out[4 * i + 3] = alpha;
  }
  return out;
}

// Nearest-neighbor upscale so pixel-level Dice intuition matches the screen:
// no smoothing, each mask pixel becomes a scale x scale block.
export function upscaleNearest(
  rgba: Uint8ClampedArray,
  size: number,
  scale: number,
): Uint8ClampedArray {
  const out = new Uint8ClampedArray(size * scale * size * scale * 4);
  for (let y = 0; y < size * scale; y++) {
    const sy = Math.floor(y / scale);
    for (let x = 0; x < size * scale; x++) {
      const sx = Math.floor(x / scale);
      const src = 4 * (sy * size + sx);
      const dst = 4 * (y * size * scale + x);
      out[dst] = rgba[src];
      out[dst + 1] = rgba[src + 1];
      out[dst + 2] = rgba[src + 2];
      out[dst + 3] = rgba[src + 3];
    }
  }
  return out;
}

// Split view: left of `divider` (fraction) shows A, the rest shows B.
export function splitPixels(
  a: Uint8ClampedArray,
  b: Uint8ClampedArray,
  size: number,
  divider: number,
): Uint8ClampedArray {
  if (a.length !== b.length) throw new Error("split inputs differ in size");
  const cut = Math.round(Math.min(Math.max(divider, 0), 1) * size);
  const out = new Uint8ClampedArray(a.length);
  for (let y = 0; y < size; y++) {
    for (let x = 0; x < size; x++) {
      const i = 4 * (y * size + x);
      const src = x < cut ? a : b;
      out[i] = src[i];
      out[i + 1] = src[i + 1];
      out[i + 2] = src[i + 2];
      out[i + 3] = src[i + 3];
    }
  }
  return out;
}
