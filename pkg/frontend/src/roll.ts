/** Piano-roll geometry: roll entries to canvas rectangles.
 *
 * Pure math so it can be tested without a DOM. Time scrolls right to
 * left with `nowMs` pinned to the right edge; pitch maps bottom-up
 * across the standard 88 keys.
 */

import type { RollEntry } from "./state.js";

export const PITCH_LO = 21;
export const PITCH_HI = 108;

export type RollRect = {
  x: number;
  y: number;
  w: number;
  h: number;
  source: "human" | "ai";
  dropped: boolean;
  open: boolean;
};

export type RollLayout = {
  width: number;
  height: number;
  /** visible time span ending at nowMs */
  spanMs: number;
};

export function layoutRoll(
  entries: readonly RollEntry[],
  nowMs: number,
  layout: RollLayout,
): RollRect[] {
  const { width, height, spanMs } = layout;
  if (width <= 0 || height <= 0 || spanMs <= 0) return [];
  const t0 = nowMs - spanMs;
  const pxPerMs = width / spanMs;
  const rowH = height / (PITCH_HI - PITCH_LO + 1);
  const rects: RollRect[] = [];
  for (const e of entries) {
    if (e.pitch < PITCH_LO || e.pitch > PITCH_HI) continue;
    const endMs = e.offMs ?? nowMs;
    if (endMs < t0 || e.onMs > nowMs) continue;
    const clippedOn = Math.max(e.onMs, t0);
    const clippedEnd = Math.min(endMs, nowMs);
    const x = (clippedOn - t0) * pxPerMs;
    const w = Math.max((clippedEnd - clippedOn) * pxPerMs, 2);
    // pitch rows grow downward from the top, high notes on top
    const y = (PITCH_HI - e.pitch) * rowH;
    rects.push({
      x,
      y,
      w,
      h: Math.max(rowH - 1, 1),
      source: e.source,
      dropped: e.dropped,
      open: e.offMs === null,
    });
  }
  return rects;
}
