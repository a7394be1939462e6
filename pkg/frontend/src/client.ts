/** Reconnecting WebSocket wrapper for the duet gateway.
 *
 * Sends the role handshake on every (re)connect and backs off
 * exponentially between attempts. Input sent while the socket is down
 * is dropped, not queued: stale piano keystrokes are worse than lost
 * ones.
 */

import { hello } from "./protocol.js";
import type { ConnectionStatus } from "./state.js";

const BACKOFF_START_MS = 500;
const BACKOFF_MAX_MS = 8000;

export class GatewayClient {
  onRecord: (line: string) => void = () => {};
  onStatus: (status: ConnectionStatus) => void = () => {};

  private ws: WebSocket | null = null;
  private backoffMs = BACKOFF_START_MS;
  private reconnectTimer: ReturnType<typeof setTimeout> | null = null;
  private stopped = false;

  constructor(
    private readonly url: string,
    private readonly role: "performer" | "observer" = "performer",
  ) {}

  connect(): void {
    this.stopped = false;
    this.open();
  }

  /** Send one protocol line. Returns false when the socket is down. */
  send(line: string): boolean {
    if (this.ws === null || this.ws.readyState !== WebSocket.OPEN) return false;
    this.ws.send(line);
    return true;
  }

  close(): void {
    this.stopped = true;
    if (this.reconnectTimer !== null) {
      clearTimeout(this.reconnectTimer);
      this.reconnectTimer = null;
    }
    this.ws?.close();
    this.ws = null;
  }

  private open(): void {
    this.onStatus("connecting");
    const ws = new WebSocket(this.url);
    this.ws = ws;
    ws.onopen = () => {
      this.backoffMs = BACKOFF_START_MS;
      ws.send(hello(this.role));
      this.onStatus("open");
    };
    ws.onmessage = (ev) => {
      this.onRecord(String(ev.data));
    };
    ws.onclose = () => {
      if (this.ws !== ws) return;
      this.ws = null;
      this.onStatus("closed");
      this.scheduleReconnect();
    };
    ws.onerror = () => {
      // onclose follows and owns the retry
    };
  }

  private scheduleReconnect(): void {
    if (this.stopped || this.reconnectTimer !== null) return;
    this.reconnectTimer = setTimeout(() => {
      this.reconnectTimer = null;
      if (!this.stopped) this.open();
    }, this.backoffMs);
    this.backoffMs = Math.min(this.backoffMs * 2, BACKOFF_MAX_MS);
  }
}
