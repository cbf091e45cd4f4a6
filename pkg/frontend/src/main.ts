// Entry point: connect, render the latest frame, stream steering input.

import { axesToTarget, InputTracker } from './input.js';
import { render } from './render.js';
import type { StateFrame } from './protocol.js';
import { SteerClient } from './wsClient.js';

const canvas = document.getElementById('view') as HTMLCanvasElement;
const ctx = canvas.getContext('2d')!;
const statusEl = document.getElementById('status')!;

const url = `ws://${location.hostname}:${location.port || 8700}/ws`;
let latest: StateFrame | null = null;

const client = new SteerClient(url, {
  onFrame: (frame) => {
    latest = frame;
  },
  onStatus: (status, detail) => {
    statusEl.textContent = detail ? `${status}: ${detail}` : status;
    statusEl.className = status;
  },
});

const input = new InputTracker();
input.attach(document as unknown as Parameters<InputTracker['attach']>[0]);
document.addEventListener('keydown', (e) => {
  if (e.code === 'KeyR') client.reset();
});

function tick(): void {
  const pads = typeof navigator.getGamepads === 'function'
    ? navigator.getGamepads() : [];
  const pad = pads && pads[0] ? pads[0] : undefined;
  client.steer(axesToTarget(input.axes(pad ?? undefined)));
  if (latest) render(ctx, latest);
  requestAnimationFrame(tick);
}

requestAnimationFrame(tick);
