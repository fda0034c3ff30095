/** Live event stream over /api/im/stream (server-sent events).
 *
 * One subscription per app. On drop, reconnects with a short delay and
 * reports its state so the UI can show a reconnect indicator. The
 * stream replays pending items on connect, so a reconnect never loses
 * messages; duplicates are filtered by envelope message_id.
 */

import type { EnvelopeWire, PushEvent } from "./types.js";

export type StreamState = "connecting" | "open" | "reconnecting";

interface EventSourceLike {
  addEventListener(type: string, listener: (ev: MessageEvent) => void): void;
  onopen: ((ev: unknown) => void) | null;
  onerror: ((ev: unknown) => void) | null;
  close(): void;
}

export type EventSourceFactory = (url: string) => EventSourceLike;

const EVENT_KINDS = ["message", "invite", "partyline"] as const;

export class ImStream {
  private source: EventSourceLike | null = null;
  private closed = false;
  private seen = new Set<string>();

  constructor(
    private readonly onEvent: (event: PushEvent) => void,
    private readonly onState: (state: StreamState) => void,
    private readonly makeSource: EventSourceFactory = (url) =>
      new EventSource(url) as unknown as EventSourceLike,
    private readonly reconnectDelayMs: number = 1000,
  ) {}

  start(): void {
    this.closed = false;
    this.connect("connecting");
  }

  private connect(state: StreamState): void {
    if (this.closed) return;
    this.onState(state);
    const source = this.makeSource("/api/im/stream");
    this.source = source;
    for (const kind of EVENT_KINDS) {
      source.addEventListener(kind, (ev) => this.dispatch(JSON.parse(ev.data)));
    }
    source.onopen = () => this.onState("open");
    source.onerror = () => {
      source.close();
      if (this.closed) return;
      setTimeout(() => this.connect("reconnecting"), this.reconnectDelayMs);
    };
  }

  private dispatch(event: PushEvent): void {
    if (event.kind === "message") {
      const id = (event.envelope as EnvelopeWire).message_id;
      if (this.seen.has(id)) return; // replayed across a reconnect
      this.seen.add(id);
    }
    this.onEvent(event);
  }

  stop(): void {
    this.closed = true;
    this.source?.close();
  }
}

/** Conversation view model: incoming INSTANT envelopes in arrival order. */
export interface ChatLine {
  from: string;
  text: string;
  sentAt: number;
}

export function chatLine(envelope: EnvelopeWire): ChatLine {
  const part = envelope.body[0];
  return {
    from: envelope.from,
    text: part ? atob(part.data) : "",
    sentAt: envelope.sent_at,
  };
}
