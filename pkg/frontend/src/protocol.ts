// Wire protocol shared with the steering service (text frames of JSON).

export interface AgentFrame {
  p: [number, number, number];
  v: [number, number, number];
}

export interface SceneFrame {
  cylinders: Array<[number, number, number, number | null]>;
  boxes: Array<[number, number, number, number, number, number]>;
  bounds: number;
}

export interface StateFrame {
  type: 'state';
  tick: number;
  agents: AgentFrame[];
  scene: SceneFrame;
  plan: Array<[number, number, number]>;
  target_v?: [number, number];
  target_z?: number | null;
  writer?: number | null;
}

export interface ErrorFrame {
  type: 'error';
  msg: string;
}

export type ServerFrame = StateFrame | ErrorFrame;

export interface SteerMessage {
  type: 'steer';
  target_v: [number, number];
  target_z: number | null;
}

export interface ResetMessage {
  type: 'reset';
}

function isVec(x: unknown, n: number): boolean {
  return Array.isArray(x) && x.length === n && x.every((v) => typeof v === 'number');
}

/** Parse a server frame; null for anything malformed (the frame is dropped). */
export function parseServerFrame(raw: string): ServerFrame | null {
  let msg: unknown;
  try {
    msg = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof msg !== 'object' || msg === null) return null;
  const obj = msg as Record<string, unknown>;
  if (obj.type === 'error' && typeof obj.msg === 'string') {
    return { type: 'error', msg: obj.msg };
  }
  if (obj.type !== 'state') return null;
  if (typeof obj.tick !== 'number' || !Array.isArray(obj.agents)) return null;
  for (const agent of obj.agents as Array<Record<string, unknown>>) {
    if (!isVec(agent?.p, 3) || !isVec(agent?.v, 3)) return null;
  }
  if (!Array.isArray(obj.plan) || !(obj.plan as unknown[]).every((r) => isVec(r, 3))) {
    return null;
  }
  return obj as unknown as StateFrame;
}
