// Keyboard/gamepad state -> steering targets.
//
// Axes map to a planar target velocity scaled to +-MAX_SPEED m/s; diagonals
// are normalized so the speed never exceeds the cap. Holding the jump key
// sets a transient height target.

import type { SteerMessage } from './protocol.js';

export const MAX_SPEED = 3.0;
export const JUMP_TARGET_Z = 0.6;

export interface AxisState {
  x: number; // left/right in [-1, 1]
  y: number; // forward/back in [-1, 1]
  jump: boolean;
}

export function axesToTarget(axes: AxisState): SteerMessage {
  let vx = axes.y * MAX_SPEED;
  let vy = 0 - axes.x * MAX_SPEED; // 0- form avoids emitting negative zero
  const speed = Math.hypot(vx, vy);
  if (speed > MAX_SPEED) {
    vx *= MAX_SPEED / speed;
    vy *= MAX_SPEED / speed;
  }
  return {
    type: 'steer',
    target_v: [vx, vy],
    target_z: axes.jump ? JUMP_TARGET_Z : null,
  };
}

const KEY_AXES: Record<string, Partial<AxisState>> = {
  KeyW: { y: 1 },
  ArrowUp: { y: 1 },
  KeyS: { y: -1 },
  ArrowDown: { y: -1 },
  KeyA: { x: -1 },
  ArrowLeft: { x: -1 },
  KeyD: { x: 1 },
  ArrowRight: { x: 1 },
};

export class InputTracker {
  private keys = new Set<string>();

  keyDown(code: string): void {
    this.keys.add(code);
  }

  keyUp(code: string): void {
    this.keys.delete(code);
  }

  /** Current axes from held keys, preferring a connected gamepad if given. */
  axes(gamepad?: { axes: ReadonlyArray<number>; buttons: ReadonlyArray<{ pressed: boolean }> }): AxisState {
    if (gamepad) {
      return {
        x: clampUnit(gamepad.axes[0] ?? 0),
        y: clampUnit(-(gamepad.axes[1] ?? 0)),
        jump: gamepad.buttons[0]?.pressed ?? false,
      };
    }
    let x = 0;
    let y = 0;
    for (const code of this.keys) {
      const a = KEY_AXES[code];
      if (a) {
        x += a.x ?? 0;
        y += a.y ?? 0;
      }
    }
    return { x: clampUnit(x), y: clampUnit(y), jump: this.keys.has('Space') };
  }

  attach(target: { addEventListener(type: string, fn: (e: KeyboardEvent) => void): void }): void {
    target.addEventListener('keydown', (e) => this.keyDown(e.code));
    target.addEventListener('keyup', (e) => this.keyUp(e.code));
  }
}

function clampUnit(v: number): number {
  return Math.max(-1, Math.min(1, v));
}
