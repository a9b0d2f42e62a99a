/** Group coloring and the legend model. */

import type { ProjectionResponse } from "./types.js";

// Qualitative 12-color palette; groups beyond it wrap around.
export const PALETTE = [
  "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
  "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac", "#1b9e77", "#7570b3",
];

export interface LegendEntry {
  group: string;
  color: string;
  count: number;
}

export function colorFor(group: string, groups: string[]): string {
  const idx = groups.indexOf(group);
  return PALETTE[(idx >= 0 ? idx : 0) % PALETTE.length];
}

/** One legend entry per group, in the payload's (sorted) group order. */
export function buildLegend(payload: ProjectionResponse): LegendEntry[] {
  const counts = new Map<string, number>();
  for (const p of payload.points) {
    counts.set(p.group, (counts.get(p.group) ?? 0) + 1);
  }
  return payload.groups.map((group) => ({
    group,
    color: colorFor(group, payload.groups),
    count: counts.get(group) ?? 0,
  }));
}
