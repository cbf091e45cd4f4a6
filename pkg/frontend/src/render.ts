// Top-down canvas renderer: obstacles, agent, predicted plan, height gauge.
// Renders only server-authoritative frames; nothing is simulated locally.

import type { StateFrame } from './protocol.js';

export interface Ctx2D {
  canvas: { width: number; height: number };
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
  fillRect(x: number, y: number, w: number, h: number): void;
  strokeRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  stroke(): void;
  fill(): void;
  fillText(text: string, x: number, y: number): void;
}

export interface Viewport {
  centerX: number;
  centerY: number;
  scale: number; // pixels per meter
}

export function worldToScreen(vp: Viewport, canvas: { width: number; height: number },
                              x: number, y: number): [number, number] {
  // +x world points right, +y world points up on screen
  return [
    canvas.width / 2 + (x - vp.centerX) * vp.scale,
    canvas.height / 2 - (y - vp.centerY) * vp.scale,
  ];
}

const GRID_STEP_M = 1;

export function render(ctx: Ctx2D, frame: StateFrame, vp?: Viewport): void {
  const agent = frame.agents[0];
  const view: Viewport = vp ?? {
    centerX: agent ? agent.p[0] : 0,
    centerY: agent ? agent.p[1] : 0,
    scale: 40,
  };
  const { canvas } = ctx;
  ctx.fillStyle = '#101418';
  ctx.fillRect(0, 0, canvas.width, canvas.height);

  // grid
  ctx.strokeStyle = '#23292f';
  ctx.lineWidth = 1;
  const metersAcross = canvas.width / view.scale;
  const x0 = Math.floor(view.centerX - metersAcross / 2);
  for (let gx = x0; gx <= view.centerX + metersAcross / 2 + 1; gx += GRID_STEP_M) {
    const [sx] = worldToScreen(view, canvas, gx, 0);
    line(ctx, sx, 0, sx, canvas.height);
  }
  const metersDown = canvas.height / view.scale;
  const y0 = Math.floor(view.centerY - metersDown / 2);
  for (let gy = y0; gy <= view.centerY + metersDown / 2 + 1; gy += GRID_STEP_M) {
    const [, sy] = worldToScreen(view, canvas, 0, gy);
    line(ctx, 0, sy, canvas.width, sy);
  }

  // obstacles
  ctx.fillStyle = '#4a5568';
  for (const [cx, cy, r] of frame.scene?.cylinders ?? []) {
    const [sx, sy] = worldToScreen(view, canvas, cx, cy);
    ctx.beginPath();
    ctx.arc(sx, sy, r * view.scale, 0, Math.PI * 2);
    ctx.fill();
  }
  for (const [bx, by, , hx, hy] of frame.scene?.boxes ?? []) {
    const [sx, sy] = worldToScreen(view, canvas, bx - hx, by + hy);
    ctx.fillRect(sx, sy, 2 * hx * view.scale, 2 * hy * view.scale);
  }

  // plan polyline (one vertex per predicted step)
  if (frame.plan.length > 0) {
    ctx.strokeStyle = '#63b3ed';
    ctx.lineWidth = 2;
    ctx.beginPath();
    const [px0, py0] = worldToScreen(view, canvas, frame.plan[0][0], frame.plan[0][1]);
    ctx.moveTo(px0, py0);
    for (const [x, y] of frame.plan.slice(1)) {
      const [sx, sy] = worldToScreen(view, canvas, x, y);
      ctx.lineTo(sx, sy);
    }
    ctx.stroke();
  }

  // agent marker, sized by height above ground
  if (agent) {
    const [ax, ay] = worldToScreen(view, canvas, agent.p[0], agent.p[1]);
    ctx.fillStyle = '#f6e05e';
    ctx.beginPath();
    ctx.arc(ax, ay, 6 + agent.p[2] * 14, 0, Math.PI * 2);
    ctx.fill();
    // side height gauge
    ctx.fillStyle = '#2d3748';
    ctx.fillRect(canvas.width - 26, 10, 16, 110);
    ctx.fillStyle = '#f6e05e';
    const h = Math.min(Math.max(agent.p[2] / 1.0, 0), 1) * 106;
    ctx.fillRect(canvas.width - 24, 118 - h, 12, h);
  }

  ctx.fillStyle = '#cbd5e0';
  ctx.font = '12px monospace';
  ctx.fillText(`tick ${frame.tick}`, 8, 16);
}

function line(ctx: Ctx2D, x0: number, y0: number, x1: number, y1: number): void {
  ctx.beginPath();
  ctx.moveTo(x0, y0);
  ctx.lineTo(x1, y1);
  ctx.stroke();
}
