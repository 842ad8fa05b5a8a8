// Run-length mask decoding. Every mask pixel in the UI originates from a
// server RLE via this function; the client never computes masks itself.

export interface Rle {
  shape: number[];
  runs: [number, number][];
}

export function decodeRle(rle: Rle): Uint8Array {
  const total = rle.shape.reduce((a, b) => a * b, 1);
  const out = new Uint8Array(total);
  let pos = 0;
  for (const [value, count] of rle.runs) {
    if (count < 0) throw new Error(`negative run length ${count}`);
    out.fill(value, pos, pos + count);
    pos += count;
  }
  if (pos !== total) {
    throw new Error(`runs cover ${pos} pixels, mask needs ${total}`);
  }
  return out;
}

export function classCounts(labels: Uint8Array, numClasses: number): number[] {
  const counts = new Array<number>(numClasses).fill(0);
  for (const v of labels) {
    if (v < numClasses) counts[v] += 1;
  }
  return counts;
}
