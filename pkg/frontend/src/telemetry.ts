// Telemetry panel state: live training stats plus the arbitration outcome of
// the most recent interventions (was the mentor's or the physics action
// executed).

import type { MetricsMessage, SceneFrame } from './protocol.js';
import { SOURCE_LABELS } from './protocol.js';

export interface TelemetryState {
  stepIndex: number;
  takeoverRate: number | null;
  valueTakeoverRate: number | null;
  trainViolations: number | null;
  episodeReturn: number | null;
  successRate: number | null;
  humanChosen: number;
  physicsChosen: number;
  lastSource: string;
  decodeFailures: number;
  droppedFrames: number;
}

export function initialTelemetry(): TelemetryState {
  return {
    stepIndex: 0,
    takeoverRate: null,
    valueTakeoverRate: null,
    trainViolations: null,
    episodeReturn: null,
    successRate: null,
    humanChosen: 0,
    physicsChosen: 0,
    lastSource: 'av',
    decodeFailures: 0,
    droppedFrames: 0,
  };
}

export function applyFrame(state: TelemetryState, frame: SceneFrame): TelemetryState {
  if (frame.stepIndex < state.stepIndex) {
    // frames must be monotone; ignore stragglers but count them
    return { ...state, droppedFrames: state.droppedFrames + 1 };
  }
  const next = { ...state, stepIndex: frame.stepIndex, lastSource: SOURCE_LABELS[frame.source] ?? 'av' };
  if (frame.intervened) {
    if (frame.source === 1) next.humanChosen += 1;
    else if (frame.source === 2) next.physicsChosen += 1;
  }
  return next;
}

export function applyMetrics(state: TelemetryState, msg: MetricsMessage): TelemetryState {
  const m = msg.metrics as Record<string, number | null>;
  return {
    ...state,
    takeoverRate: (m['takeover_rate'] as number) ?? state.takeoverRate,
    valueTakeoverRate: (m['value_takeover_rate'] as number) ?? state.valueTakeoverRate,
    trainViolations: (m['train_safety_violations'] as number) ?? state.trainViolations,
    episodeReturn: (m['episode_return_mean'] as number | null) ?? state.episodeReturn,
    successRate: (m['success_rate'] as number | null) ?? state.successRate,
  };
}

export function renderTelemetry(el: HTMLElement, s: TelemetryState): void {
  const fmt = (x: number | null, digits = 2) => (x === null ? '-' : x.toFixed(digits));
  el.innerHTML = `
    <div>step <b>${s.stepIndex}</b> | control: <b class="src-${s.lastSource}">${s.lastSource}</b></div>
    <div>takeover rate ${fmt(s.takeoverRate)} | mentor-action share ${fmt(s.valueTakeoverRate)}</div>
    <div>arbitration outcomes: mentor ${s.humanChosen} / physics ${s.physicsChosen}</div>
    <div>train violations ${fmt(s.trainViolations, 0)} | episode return ${fmt(s.episodeReturn, 1)} | success ${fmt(s.successRate)}</div>
    <div>decode failures ${s.decodeFailures} | dropped frames ${s.droppedFrames}</div>
  `;
}
