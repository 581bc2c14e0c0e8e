/**
 * Binary PPM (P6) images plus a deterministic synthetic outdoor scene
 * used when no photograph is on disk.
 */

import { readFileSync } from "node:fs";
import { Rng } from "./prng.js";
import { writeFileAtomic } from "./fsat.js";

export interface RgbImage {
  width: number;
  height: number;
  /** Interleaved RGB, values in [0, 1]. */
  data: Float64Array;
}

export function decodePpm(blob: Buffer): RgbImage {
  const header = blob.toString("ascii", 0, Math.min(blob.length, 512));
  const match = /^P6\s+(?:#[^\n]*\n\s*)?(\d+)\s+(\d+)\s+(\d+)\s/.exec(header);
  if (!match) throw new Error("not a binary P6 PPM file");
  const [, w, h, maxval] = match;
  const width = parseInt(w, 10);
  const height = parseInt(h, 10);
  const scale = parseInt(maxval, 10);
  const offset = match[0].length;
  const expected = width * height * 3;
  if (blob.length < offset + expected) {
    throw new Error(`PPM payload truncated: need ${expected} bytes`);
  }
  const data = new Float64Array(expected);
  for (let i = 0; i < expected; i++) data[i] = blob[offset + i] / scale;
  return { width, height, data };
}

export function encodePpm(image: RgbImage): Buffer {
  const header = Buffer.from(`P6\n${image.width} ${image.height}\n255\n`, "ascii");
  const payload = Buffer.alloc(image.width * image.height * 3);
  for (let i = 0; i < payload.length; i++) {
    payload[i] = Math.max(0, Math.min(255, Math.round(image.data[i] * 255)));
  }
  return Buffer.concat([header, payload]);
}

export function readImage(path: string): RgbImage {
  return decodePpm(readFileSync(path));
}

export function writeImage(path: string, image: RgbImage): void {
  writeFileAtomic(path, encodePpm(image));
}

/**
 * A small landscape: sky gradient, sun disc, grass with deterministic
 * texture, and a dark animal-shaped blob on the grass. Two clearly
 * separable regions per class family, which is what a segmentation
 * smoke check needs.
 */
export function syntheticScene(width = 64, height = 64, seed = 7): RgbImage {
  const rng = new Rng(seed);
  const data = new Float64Array(width * height * 3);
  const horizon = Math.floor(height * 0.45);
  const put = (x: number, y: number, r: number, g: number, b: number) => {
    const i = (y * width + x) * 3;
    data[i] = r;
    data[i + 1] = g;
    data[i + 2] = b;
  };
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      if (y < horizon) {
        const t = y / horizon;
        put(x, y, 0.35 + 0.25 * t, 0.55 + 0.2 * t, 0.9 - 0.1 * t);
      } else {
        const texture = 0.06 * (rng.next() - 0.5);
        const t = (y - horizon) / (height - horizon);
        put(x, y, 0.18 + texture, 0.55 - 0.2 * t + texture, 0.16 + texture);
      }
    }
  }
  // sun
  const sunX = Math.floor(width * 0.78);
  const sunY = Math.floor(height * 0.18);
  const sunR = width * 0.09;
  // animal blob: ellipse body + head on the grass
  const bodyX = width * 0.38;
  const bodyY = height * 0.72;
  const bodyW = width * 0.16;
  const bodyH = height * 0.09;
  const headX = bodyX + bodyW * 1.05;
  const headY = bodyY - bodyH * 0.9;
  const headR = width * 0.055;
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      if ((x - sunX) ** 2 + (y - sunY) ** 2 < sunR * sunR) {
        put(x, y, 0.98, 0.92, 0.55);
      }
      const inBody = ((x - bodyX) / bodyW) ** 2 + ((y - bodyY) / bodyH) ** 2 < 1;
      const inHead = (x - headX) ** 2 + (y - headY) ** 2 < headR * headR;
      if (inBody || inHead) {
        put(x, y, 0.32, 0.2, 0.12);
      }
    }
  }
  return { width, height, data };
}
