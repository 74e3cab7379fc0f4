// Keyboard/gamepad -> takeover action mapping. Pure functions so the table
// is unit-testable; hold-to-take-over semantics with a single falling edge.

export interface ActionInput {
  steer: number; // negative = left
  throttle: number; // negative = brake
}

export const TAKEOVER_KEYS = [' ', 'shift'];

const LEFT = ['arrowleft', 'a'];
const RIGHT = ['arrowright', 'd'];
const UP = ['arrowup', 'w'];
const DOWN = ['arrowdown', 's'];

function anyDown(keys: Set<string>, names: string[]): boolean {
  return names.some((k) => keys.has(k));
}

export function mapKeys(keys: Set<string>): ActionInput {
  let steer = 0;
  let throttle = 0;
  if (anyDown(keys, LEFT)) steer -= 1;
  if (anyDown(keys, RIGHT)) steer += 1;
  if (anyDown(keys, UP)) throttle += 1;
  if (anyDown(keys, DOWN)) throttle -= 1;
  return { steer, throttle };
}

export function mapGamepad(axes: readonly number[], dead = 0.08): ActionInput {
  const steer = Math.abs(axes[0] ?? 0) > dead ? clamp(axes[0]) : 0;
  const raw = axes[1] ?? 0; // stick forward is negative on standard pads
  const throttle = Math.abs(raw) > dead ? clamp(-raw) : 0;
  return { steer, throttle };
}

export function takeoverHeld(keys: Set<string>): boolean {
  return anyDown(keys, TAKEOVER_KEYS);
}

function clamp(x: number): number {
  return Math.min(1, Math.max(-1, x));
}

export interface InputMessage {
  active: boolean;
  steer: number;
  throttle: number;
}

/** Emits active inputs every tick while the takeover key is held and exactly
 * one inactive message on release (or on device loss). */
export class HoldToTakeover {
  private wasHeld = false;

  sample(held: boolean, action: ActionInput): InputMessage | null {
    if (held) {
      this.wasHeld = true;
      return { active: true, steer: clamp(action.steer), throttle: clamp(action.throttle) };
    }
    if (this.wasHeld) {
      this.wasHeld = false;
      return { active: false, steer: 0, throttle: 0 };
    }
    return null;
  }

  deviceLost(): InputMessage | null {
    return this.sample(false, { steer: 0, throttle: 0 });
  }
}
