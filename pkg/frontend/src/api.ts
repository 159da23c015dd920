/**
 * Client for the simulation harness: plain JSON over HTTP for session
 * lifecycle, one WebSocket per session for tap edges.
 *
 * The WebSocket constructor is injected so the same client runs in the
 * browser (native WebSocket) and under node tests (the "ws" package).
 */

import type { TapEdge } from "./tapcode.js";

export interface SmsMessage {
  body: string;
  at_ns: number;
  pattern_text: string;
}

export interface Snapshot {
  id: string;
  mode: string;
  device_state: string;
  sim_time_s: number;
  horizon_s: number;
  done: boolean;
  handshake_established: boolean;
  executions: number;
  outcomes: string[];
  sms: SmsMessage[];
}

export interface CreateOptions {
  secret?: string;
  dose_milli?: number;
  request_at_s?: number;
  time_scale?: number;
  seed?: number;
}

export interface TapAck {
  ok: boolean;
  tick?: number;
  sampling?: boolean;
  device_state?: string;
  error?: string;
}

export class HarnessClient {
  constructor(readonly baseUrl: string) {}

  private async request(method: string, path: string, body?: unknown): Promise<unknown> {
    const res = await fetch(this.baseUrl + path, {
      method,
      headers: body === undefined ? undefined : { "content-type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!res.ok) {
      throw new Error(`${method} ${path} -> ${res.status}: ${await res.text()}`);
    }
    return res.json();
  }

  createSession(options: CreateOptions = {}): Promise<Snapshot> {
    return this.request("POST", "/sessions", { mode: "interactive", ...options }) as Promise<Snapshot>;
  }

  getSession(id: string): Promise<Snapshot> {
    return this.request("GET", `/sessions/${id}`) as Promise<Snapshot>;
  }

  /** Only valid for sessions created with time_scale 0. */
  advance(id: string, toMs: number): Promise<Snapshot> {
    return this.request("POST", `/sessions/${id}/advance`, { to_ms: toMs }) as Promise<Snapshot>;
  }

  report(id: string): Promise<Record<string, unknown>> {
    return this.request("GET", `/sessions/${id}/report`) as Promise<Record<string, unknown>>;
  }

  tapsUrl(id: string): string {
    return this.baseUrl.replace(/^http/, "ws") + `/sessions/${id}/taps`;
  }
}

/** The slice of the WebSocket surface this client needs; browsers and the
 * "ws" package both provide it. */
export interface WebSocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(type: string, listener: (event: { data?: unknown }) => void): void;
}

export type SocketFactory = (url: string) => WebSocketLike;

interface QueuedEdge {
  edge: TapEdge;
  resolve: (ack: TapAck) => void;
}

/**
 * Tap channel with reconnect. Edges are queued until the socket is open and
 * re-queued (in order, ahead of anything newer) if the connection drops
 * before their acks arrive: a flaky link loses time, never taps. The server
 * treats a repeated same-level edge as a no-op, so at-least-once is safe.
 */
export class TapSocket {
  onAck: (ack: TapAck) => void = () => {};
  onConnection: (up: boolean) => void = () => {};

  private queue: QueuedEdge[] = [];
  private inFlight: QueuedEdge[] = [];
  private socket: WebSocketLike | null = null;
  private open = false;
  private closed = false;
  private retryTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private readonly url: string,
    private readonly factory: SocketFactory,
    private readonly retryMs = 1000,
  ) {}

  connect(): void {
    if (this.closed || this.socket !== null) return;
    const socket = this.factory(this.url);
    this.socket = socket;
    socket.addEventListener("open", () => {
      this.open = true;
      this.onConnection(true);
      this.flush();
    });
    socket.addEventListener("message", (event) => {
      const ack = JSON.parse(String(event.data)) as TapAck;
      const waiting = this.inFlight.shift();
      if (waiting !== undefined) waiting.resolve(ack);
      this.onAck(ack);
    });
    socket.addEventListener("close", () => {
      this.socket = null;
      this.open = false;
      this.queue = [...this.inFlight, ...this.queue];
      this.inFlight = [];
      this.onConnection(false);
      if (!this.closed) {
        this.retryTimer = setTimeout(() => {
          this.retryTimer = null;
          this.connect();
        }, this.retryMs);
      }
    });
    socket.addEventListener("error", () => {
      // the matching close event drives recovery
    });
  }

  send(edge: TapEdge): Promise<TapAck> {
    return new Promise((resolve) => {
      this.queue.push({ edge, resolve });
      this.flush();
    });
  }

  get pendingCount(): number {
    return this.queue.length + this.inFlight.length;
  }

  close(): void {
    this.closed = true;
    if (this.retryTimer !== null) clearTimeout(this.retryTimer);
    this.socket?.close();
  }

  private flush(): void {
    if (!this.open || this.socket === null) return;
    while (this.queue.length > 0) {
      const item = this.queue.shift()!;
      this.inFlight.push(item);
      this.socket.send(JSON.stringify(item.edge));
    }
  }
}
