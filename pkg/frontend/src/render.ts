// Ego-centred top-down canvas rendering of a scene frame.

import type { SceneFrame } from './protocol.js';

export const SOURCE_COLORS: Record<number, string> = {
  0: '#3b82f6', // agent driving
  1: '#9ca3af', // mentor action executed
  2: '#f59e0b', // physics action executed
};

const PX_PER_M = 6;

export function renderFrame(ctx: CanvasRenderingContext2D, frame: SceneFrame): void {
  const { width, height } = ctx.canvas;
  ctx.fillStyle = '#10131a';
  ctx.fillRect(0, 0, width, height);

  const ego = frame.ego;
  ctx.save();
  ctx.translate(width / 2, height / 2);
  ctx.scale(PX_PER_M, -PX_PER_M); // world y up
  ctx.rotate(Math.PI / 2 - ego.heading); // ego heading points up the screen
  ctx.translate(-ego.x, -ego.y);

  drawRoad(ctx, frame);
  for (const ob of frame.obstacles) {
    drawBox(ctx, ob.x, ob.y, ob.heading, ob.length, ob.width, '#dc2626');
  }
  for (const v of frame.vehicles) {
    drawBox(ctx, v.x, v.y, v.heading, v.length, v.width, '#e5e7eb');
  }
  drawCheckpoint(ctx, frame.checkpoints[0], frame.checkpoints[1], '#22c55e');
  drawCheckpoint(ctx, frame.checkpoints[2], frame.checkpoints[3], '#16653480');
  drawBox(ctx, ego.x, ego.y, ego.heading, ego.length, ego.width, SOURCE_COLORS[frame.source] ?? '#3b82f6');
  ctx.restore();
}

function drawRoad(ctx: CanvasRenderingContext2D, frame: SceneFrame): void {
  const pts = frame.road.points;
  const half = (frame.road.laneCount * frame.road.laneWidth) / 2;
  if (pts.length < 4) return;
  for (const side of [-1, 1]) {
    ctx.beginPath();
    for (let i = 0; i + 3 < pts.length; i += 2) {
      const [x0, y0, x1, y1] = [pts[i], pts[i + 1], pts[i + 2], pts[i + 3]];
      const h = Math.atan2(y1 - y0, x1 - x0);
      const nx = -Math.sin(h) * half * side;
      const ny = Math.cos(h) * half * side;
      if (i === 0) ctx.moveTo(x0 + nx, y0 + ny);
      ctx.lineTo(x1 + nx, y1 + ny);
    }
    ctx.strokeStyle = '#f8fafc';
    ctx.lineWidth = 0.3;
    ctx.stroke();
  }
  // lane separators
  for (let lane = 1; lane < frame.road.laneCount; lane++) {
    const off = -half + lane * frame.road.laneWidth;
    ctx.beginPath();
    for (let i = 0; i + 3 < pts.length; i += 2) {
      const [x0, y0, x1, y1] = [pts[i], pts[i + 1], pts[i + 2], pts[i + 3]];
      const h = Math.atan2(y1 - y0, x1 - x0);
      const nx = -Math.sin(h) * off;
      const ny = Math.cos(h) * off;
      if (i === 0) ctx.moveTo(x0 + nx, y0 + ny);
      ctx.lineTo(x1 + nx, y1 + ny);
    }
    ctx.strokeStyle = '#475569';
    ctx.lineWidth = 0.12;
    ctx.setLineDash([2, 2]);
    ctx.stroke();
    ctx.setLineDash([]);
  }
}

function drawBox(
  ctx: CanvasRenderingContext2D,
  x: number,
  y: number,
  heading: number,
  length: number,
  width: number,
  color: string,
): void {
  ctx.save();
  ctx.translate(x, y);
  ctx.rotate(heading);
  ctx.fillStyle = color;
  ctx.fillRect(-length / 2, -width / 2, length, width);
  ctx.fillStyle = '#10131a';
  ctx.fillRect(length / 2 - 0.6, -width / 2 + 0.2, 0.4, width - 0.4); // nose marker
  ctx.restore();
}

function drawCheckpoint(ctx: CanvasRenderingContext2D, x: number, y: number, color: string): void {
  ctx.beginPath();
  ctx.arc(x, y, 1.2, 0, 2 * Math.PI);
  ctx.strokeStyle = color;
  ctx.lineWidth = 0.4;
  ctx.stroke();
}
