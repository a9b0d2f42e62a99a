import { describe, expect, it } from "vitest";
import { buildLegend, colorFor, PALETTE } from "../src/color.js";
import { hitTest, projectPoints, rotate3d } from "../src/camera.js";
import { defaultViewState } from "../src/state.js";
import type { ProjectionResponse } from "../src/types.js";

/** A payload shaped exactly like the service's: 500 points, 50 per group. */
function payload500(dims = 3): ProjectionResponse {
  const groups = Array.from({ length: 10 }, (_, g) => `C${String(g).padStart(3, "0")}`);
  const points = [];
  for (let g = 0; g < 10; g++) {
    for (let i = 0; i < 50; i++) {
      points.push({
        index: g * 50 + i,
        token: `M${String(g * 50 + i).padStart(6, "0")}`,
        coords: Array.from({ length: dims }, (_, d) => Math.sin(g + i * 0.1 + d)),
        group: groups[g],
      });
    }
  }
  return { attribute: "merchant", method: "pca", dims, color_by: "country",
           explained_variance: [0.4, 0.3, 0.1].slice(0, dims), groups, points };
}

describe("legend from a 500-point payload", () => {
  it("lists the 10 groups with counts and distinct colors", () => {
    const legend = buildLegend(payload500());
    expect(legend.length).toBe(10);
    expect(legend.map((e) => e.group)).toEqual(payload500().groups);
    for (const entry of legend) expect(entry.count).toBe(50);
    const colors = new Set(legend.map((e) => e.color));
    expect(colors.size).toBe(10);
  });

  it("uses a stable palette assignment", () => {
    const groups = ["a", "b", "c"];
    expect(colorFor("a", groups)).toBe(PALETTE[0]);
    expect(colorFor("c", groups)).toBe(PALETTE[2]);
    // unknown group falls back to the first color rather than crashing
    expect(colorFor("zz", groups)).toBe(PALETTE[0]);
  });

  it("counts uneven groups correctly", () => {
    const p = payload500();
    p.points = p.points.slice(0, 70); // 50 of group 0, 20 of group 1
    const legend = buildLegend(p);
    expect(legend[0].count).toBe(50);
    expect(legend[1].count).toBe(20);
    expect(legend[2].count).toBe(0);
  });
});

describe("screen projection", () => {
  it("renders one screen point per payload row", () => {
    const p = payload500();
    const state = { ...defaultViewState(), dims: 3 as const };
    const screen = projectPoints(p.points, p.groups, state, 800, 600);
    expect(screen.length).toBe(500);
    for (const s of screen) {
      expect(Number.isFinite(s.x)).toBe(true);
      expect(Number.isFinite(s.y)).toBe(true);
    }
  });

  it("recoloring is client-side: colors come from the payload groups", () => {
    const p = payload500();
    const state = { ...defaultViewState(), dims: 3 as const };
    const screen = projectPoints(p.points, p.groups, state, 800, 600);
    expect(screen[0].color).toBe(colorFor(p.points[0].group, p.groups));
  });

  it("empty payload yields an empty render model, not a crash", () => {
    expect(projectPoints([], [], defaultViewState(), 800, 600)).toEqual([]);
  });

  it("zooming scales distances from the canvas center", () => {
    const p = payload500(2);
    const near = { ...defaultViewState(), dims: 2 as const };
    const far = { ...near, camera: { ...near.camera, zoom: 2 } };
    const a = projectPoints(p.points, p.groups, near, 800, 600);
    const b = projectPoints(p.points, p.groups, far, 800, 600);
    const ra = Math.hypot(a[0].x - 400, a[0].y - 300);
    const rb = Math.hypot(b[0].x - 400, b[0].y - 300);
    expect(rb / ra).toBeCloseTo(2, 5);
  });

  it("orbiting changes 3d positions but not 2d ones", () => {
    const p3 = payload500(3);
    const base = { ...defaultViewState(), dims: 3 as const };
    const turned = { ...base, camera: { ...base.camera, yaw: base.camera.yaw + 1 } };
    const a = projectPoints(p3.points, p3.groups, base, 800, 600);
    const b = projectPoints(p3.points, p3.groups, turned, 800, 600);
    expect(a[0].x).not.toBeCloseTo(b[0].x, 5);

    const p2 = payload500(2);
    const flat = { ...base, dims: 2 as const };
    const flatTurned = { ...turned, dims: 2 as const };
    const c = projectPoints(p2.points, p2.groups, flat, 800, 600);
    const d = projectPoints(p2.points, p2.groups, flatTurned, 800, 600);
    expect(c[0].x).toBeCloseTo(d[0].x, 9);
  });

  it("rotation preserves vector norms", () => {
    const v = [0.3, -1.2, 2.0];
    const r = rotate3d(v, 0.7, -0.3);
    const norm = (a: number[]) => Math.hypot(...a);
    expect(norm(r)).toBeCloseTo(norm(v), 9);
  });

  it("hit test finds the nearest point within radius", () => {
    const screen = [
      { x: 100, y: 100, depth: 0, index: 0, color: "#000" },
      { x: 120, y: 100, depth: 0, index: 1, color: "#000" },
    ];
    expect(hitTest(screen, 103, 101)?.index).toBe(0);
    expect(hitTest(screen, 119, 99)?.index).toBe(1);
    expect(hitTest(screen, 500, 500)).toBeNull();
  });
});
