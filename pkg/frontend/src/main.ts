// Browser client: connects to the bridge, renders frames, and streams
// hold-to-take-over input.

import {
  decodeMessage,
  encodeTakeoverInput,
  PROTOCOL_VERSION,
  ProtocolError,
} from './protocol.js';
import { HoldToTakeover, mapGamepad, mapKeys, takeoverHeld } from './input.js';
import { renderFrame } from './render.js';
import { applyFrame, applyMetrics, initialTelemetry, renderTelemetry } from './telemetry.js';

const INPUT_HZ = 30; // client input tick (>= 20 Hz per the bridge contract)

function boot(): void {
  const canvas = document.getElementById('scene') as HTMLCanvasElement;
  const panel = document.getElementById('telemetry') as HTMLElement;
  const status = document.getElementById('status') as HTMLElement;
  const ctx = canvas.getContext('2d');
  if (!ctx) throw new Error('canvas 2d context unavailable');

  const params = new URLSearchParams(window.location.search);
  const url = params.get('bridge') ?? `ws://${window.location.hostname || '127.0.0.1'}:8700`;
  const ws = new WebSocket(url, `mentordrive.v${PROTOCOL_VERSION}`);
  ws.binaryType = 'arraybuffer';

  let telemetry = initialTelemetry();
  let latestFrame: ReturnType<typeof decodeMessage> | null = null;
  const keys = new Set<string>();
  const hold = new HoldToTakeover();

  ws.onopen = () => {
    status.textContent = `connected to ${url} - hold SPACE to take over, steer with arrows/WASD`;
  };
  ws.onclose = () => {
    status.textContent = 'disconnected';
  };
  ws.onmessage = (ev: MessageEvent<ArrayBuffer>) => {
    let msg;
    try {
      msg = decodeMessage(ev.data);
    } catch (err) {
      if (err instanceof ProtocolError) {
        telemetry = { ...telemetry, decodeFailures: telemetry.decodeFailures + 1 };
        return;
      }
      throw err;
    }
    if (msg.kind === 'state_frame') {
      telemetry = applyFrame(telemetry, msg);
      latestFrame = msg;
    } else if (msg.kind === 'metrics_update') {
      telemetry = applyMetrics(telemetry, msg);
    }
  };

  window.addEventListener('keydown', (e) => {
    keys.add(e.key.toLowerCase());
    if (e.key === ' ') e.preventDefault();
  });
  window.addEventListener('keyup', (e) => keys.delete(e.key.toLowerCase()));
  window.addEventListener('blur', () => {
    keys.clear();
    const msg = hold.deviceLost();
    if (msg && ws.readyState === WebSocket.OPEN) {
      ws.send(encodeTakeoverInput(telemetry.stepIndex, msg.active, msg.steer, msg.throttle, performance.now()));
    }
  });

  setInterval(() => {
    let action = mapKeys(keys);
    const pad = navigator.getGamepads?.()[0];
    let held = takeoverHeld(keys);
    if (pad) {
      const padAction = mapGamepad(pad.axes);
      if (padAction.steer !== 0 || padAction.throttle !== 0 || pad.buttons[0]?.pressed) {
        action = padAction;
        held = held || Boolean(pad.buttons[0]?.pressed);
      }
    }
    const msg = hold.sample(held, action);
    if (msg && ws.readyState === WebSocket.OPEN) {
      ws.send(encodeTakeoverInput(telemetry.stepIndex, msg.active, msg.steer, msg.throttle, performance.now()));
    }
  }, 1000 / INPUT_HZ);

  const draw = () => {
    if (latestFrame && latestFrame.kind === 'state_frame') {
      renderFrame(ctx, latestFrame);
    }
    renderTelemetry(panel, telemetry);
    requestAnimationFrame(draw);
  };
  requestAnimationFrame(draw);
}

boot();
