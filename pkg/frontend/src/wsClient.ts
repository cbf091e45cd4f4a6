// Websocket client: server-authoritative state in, rate-limited steering out.

import { parseServerFrame, type StateFrame, type SteerMessage } from './protocol.js';

export const MIN_SEND_INTERVAL_MS = 50; // never more than one steer per 50 ms

export interface WsLike {
  readyState: number;
  send(data: string): void;
  close(): void;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  onopen: (() => void) | null;
}

export type ConnectionStatus = 'connecting' | 'open' | 'closed';

export interface ClientOptions {
  onFrame: (frame: StateFrame) => void;
  onStatus?: (status: ConnectionStatus, detail?: string) => void;
  now?: () => number;
  reconnectDelayMs?: number;
  schedule?: (fn: () => void, ms: number) => unknown;
}

/**
 * Coalescing sender: the latest target wins, sends are spaced by at least
 * MIN_SEND_INTERVAL_MS, and a trailing send flushes the last coalesced value.
 */
export class SteerSender {
  private lastSent = -Infinity;
  private pending: SteerMessage | null = null;
  private timerArmed = false;

  constructor(
    private send: (msg: SteerMessage) => void,
    private now: () => number = () => Date.now(),
    private schedule: (fn: () => void, ms: number) => unknown =
      (fn, ms) => setTimeout(fn, ms),
  ) {}

  submit(msg: SteerMessage): void {
    const t = this.now();
    if (t - this.lastSent >= MIN_SEND_INTERVAL_MS) {
      this.lastSent = t;
      this.send(msg);
      return;
    }
    this.pending = msg;
    if (!this.timerArmed) {
      this.timerArmed = true;
      const wait = MIN_SEND_INTERVAL_MS - (t - this.lastSent);
      this.schedule(() => this.flush(), wait);
    }
  }

  private flush(): void {
    this.timerArmed = false;
    if (this.pending) {
      this.lastSent = this.now();
      this.send(this.pending);
      this.pending = null;
    }
  }
}

export class SteerClient {
  status: ConnectionStatus = 'connecting';
  droppedFrames = 0;
  readonly sender: SteerSender;
  private ws: WsLike | null = null;
  private closedByUser = false;

  constructor(
    private url: string,
    private opts: ClientOptions,
    private factory: (url: string) => WsLike =
      (u) => new WebSocket(u) as unknown as WsLike,
  ) {
    this.sender = new SteerSender(
      (msg) => this.sendRaw(JSON.stringify(msg)),
      opts.now,
      opts.schedule,
    );
    this.connect();
  }

  private connect(): void {
    this.setStatus('connecting');
    const ws = this.factory(this.url);
    this.ws = ws;
    ws.onopen = () => this.setStatus('open');
    ws.onmessage = (ev) => {
      const frame = parseServerFrame(String(ev.data));
      if (frame === null) {
        this.droppedFrames += 1;
        this.opts.onStatus?.(this.status, 'malformed frame dropped');
        return;
      }
      if (frame.type === 'error') {
        this.opts.onStatus?.(this.status, frame.msg);
        return;
      }
      this.opts.onFrame(frame);
    };
    ws.onclose = () => {
      this.setStatus('closed');
      if (!this.closedByUser) {
        const delay = this.opts.reconnectDelayMs ?? 1000;
        (this.opts.schedule ?? ((fn, ms) => setTimeout(fn, ms)))(
          () => this.connect(), delay);
      }
    };
  }

  steer(msg: SteerMessage): void {
    this.sender.submit(msg);
  }

  reset(): void {
    this.sendRaw(JSON.stringify({ type: 'reset' }));
  }

  close(): void {
    this.closedByUser = true;
    this.ws?.close();
  }

  private sendRaw(data: string): void {
    if (this.ws && this.ws.readyState === 1) {
      this.ws.send(data);
    }
  }

  private setStatus(status: ConnectionStatus): void {
    this.status = status;
    this.opts.onStatus?.(status);
  }
}
