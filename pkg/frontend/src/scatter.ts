/** Canvas scatter rendering over the pure render model. */

import { projectPoints, type ScreenPoint } from "./camera.js";
import type { ViewState } from "./state.js";
import type { ProjectionResponse } from "./types.js";

export class ScatterRenderer {
  private canvas: HTMLCanvasElement;
  private ctx: CanvasRenderingContext2D;
  screen: ScreenPoint[] = [];

  constructor(canvas: HTMLCanvasElement) {
    this.canvas = canvas;
    const ctx = canvas.getContext("2d");
    if (ctx === null) throw new Error("canvas 2d context unavailable");
    this.ctx = ctx;
  }

  render(payload: ProjectionResponse | null, state: ViewState): void {
    const { width, height } = this.canvas;
    this.ctx.clearRect(0, 0, width, height);
    if (payload === null || payload.points.length === 0) {
      this.ctx.fillStyle = "#888";
      this.ctx.font = "14px system-ui, sans-serif";
      this.ctx.textAlign = "center";
      this.ctx.fillText("no points to display", width / 2, height / 2);
      this.screen = [];
      return;
    }
    this.screen = projectPoints(payload.points, payload.groups, state,
                                width, height);
    // painter's order: far points first in 3D
    const order = [...this.screen].sort((a, b) => a.depth - b.depth);
    for (const p of order) {
      const selected = state.selected === p.index;
      this.ctx.beginPath();
      this.ctx.arc(p.x, p.y, selected ? 6 : 3.2, 0, Math.PI * 2);
      this.ctx.fillStyle = p.color;
      this.ctx.globalAlpha = selected ? 1.0 : 0.85;
      this.ctx.fill();
      if (selected) {
        this.ctx.globalAlpha = 1.0;
        this.ctx.lineWidth = 2;
        this.ctx.strokeStyle = "#111";
        this.ctx.stroke();
      }
    }
    this.ctx.globalAlpha = 1.0;
  }
}
