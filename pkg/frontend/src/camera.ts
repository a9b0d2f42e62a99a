/** Screen-space projection of 2D/3D scatter coordinates.
 *
 * 3D uses an orbiting orthographic camera (yaw around the vertical axis,
 * pitch around the horizontal one); 2D ignores the angles. All math is
 * pure so the render model is testable without a canvas.
 */

import type { ProjectionPoint } from "./types.js";
import type { ViewState } from "./state.js";
import { colorFor } from "./color.js";

export interface ScreenPoint {
  x: number;
  y: number;
  depth: number;
  index: number; // position within the payload's point list
  color: string;
}

export function rotate3d(coords: number[], yaw: number, pitch: number): [number, number, number] {
  const [x, y, z = 0] = coords;
  const cy = Math.cos(yaw), sy = Math.sin(yaw);
  const cp = Math.cos(pitch), sp = Math.sin(pitch);
  // yaw about y-axis, then pitch about x-axis
  const x1 = cy * x + sy * z;
  const z1 = -sy * x + cy * z;
  const y2 = cp * y - sp * z1;
  const z2 = sp * y + cp * z1;
  return [x1, y2, z2];
}

export function projectPoints(points: ProjectionPoint[], groups: string[],
                              state: ViewState, width: number,
                              height: number): ScreenPoint[] {
  if (points.length === 0) return [];
  const rotated = points.map((p) => state.dims === 3
    ? rotate3d(p.coords, state.camera.yaw, state.camera.pitch)
    : [p.coords[0], p.coords[1] ?? 0, 0] as [number, number, number]);
  let maxAbs = 1e-9;
  for (const [x, y] of rotated) {
    maxAbs = Math.max(maxAbs, Math.abs(x), Math.abs(y));
  }
  const scale = (Math.min(width, height) / 2 - 12) * state.camera.zoom / maxAbs;
  return rotated.map(([x, y, z], i) => ({
    x: width / 2 + x * scale,
    y: height / 2 - y * scale,
    depth: z,
    index: i,
    color: colorFor(points[i].group, groups),
  }));
}

/** Nearest rendered point within `radius` pixels, or null. */
export function hitTest(screen: ScreenPoint[], x: number, y: number,
                        radius = 8): ScreenPoint | null {
  let best: ScreenPoint | null = null;
  let bestD = radius * radius;
  for (const p of screen) {
    const d = (p.x - x) ** 2 + (p.y - y) ** 2;
    if (d <= bestD) {
      best = p;
      bestD = d;
    }
  }
  return best;
}
