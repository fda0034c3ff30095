import { describe, expect, it, vi } from "vitest";
import { ImStream, chatLine, type StreamState } from "../src/im.js";
import type { EnvelopeWire, PushEvent } from "../src/types.js";

class FakeSource {
  listeners = new Map<string, (ev: { data: string }) => void>();
  onopen: ((ev: unknown) => void) | null = null;
  onerror: ((ev: unknown) => void) | null = null;
  closed = false;

  constructor(public url: string) {}
  addEventListener(type: string, listener: (ev: { data: string }) => void) {
    this.listeners.set(type, listener);
  }
  emit(type: string, doc: unknown) {
    this.listeners.get(type)?.({ data: JSON.stringify(doc) });
  }
  close() {
    this.closed = true;
  }
}

function envelope(id: string, text: string): EnvelopeWire {
  return {
    message_id: id,
    from: "a@x.test",
    to: ["b@y.test"],
    subject: "",
    sent_at: 7,
    body: [{ content_type: "text/plain", data: btoa(text) }],
    flags: ["INSTANT"],
    attachments: [],
    headers: [],
    signatures: [],
  };
}

describe("ImStream", () => {
  it("subscribes to the documented stream URL and dispatches events", () => {
    const sources: FakeSource[] = [];
    const events: PushEvent[] = [];
    const states: StreamState[] = [];
    const stream = new ImStream(
      (e) => events.push(e),
      (s) => states.push(s),
      (url) => {
        const s = new FakeSource(url);
        sources.push(s);
        return s;
      },
      0,
    );
    stream.start();
    expect(sources[0].url).toBe("/api/im/stream");
    sources[0].onopen?.(null);
    sources[0].emit("message", { kind: "message", envelope: envelope("m1", "hi") });
    sources[0].emit("partyline", {
      kind: "partyline",
      channel_id: "c1",
      from: "a@x.test",
      text: "yo",
    });
    expect(states).toEqual(["connecting", "open"]);
    expect(events.map((e) => e.kind)).toEqual(["message", "partyline"]);
    stream.stop();
    expect(sources[0].closed).toBe(true);
  });

  it("reconnects after a drop and filters replayed messages", async () => {
    vi.useFakeTimers();
    const sources: FakeSource[] = [];
    const events: PushEvent[] = [];
    const states: StreamState[] = [];
    const stream = new ImStream(
      (e) => events.push(e),
      (s) => states.push(s),
      (url) => {
        const s = new FakeSource(url);
        sources.push(s);
        return s;
      },
      10,
    );
    stream.start();
    sources[0].onopen?.(null);
    sources[0].emit("message", { kind: "message", envelope: envelope("m1", "hi") });

    sources[0].onerror?.(null); // drop
    expect(sources[0].closed).toBe(true);
    await vi.advanceTimersByTimeAsync(10);
    expect(sources.length).toBe(2);
    expect(states).toContain("reconnecting");

    sources[1].onopen?.(null);
    // the server replays pending items on connect; m1 must not duplicate
    sources[1].emit("message", { kind: "message", envelope: envelope("m1", "hi") });
    sources[1].emit("message", { kind: "message", envelope: envelope("m2", "again") });
    expect(
      events
        .filter((e) => e.kind === "message")
        .map((e) => (e as { envelope: EnvelopeWire }).envelope.message_id),
    ).toEqual(["m1", "m2"]);

    stream.stop();
    await vi.advanceTimersByTimeAsync(100);
    expect(sources.length).toBe(2); // no reconnect after stop
    vi.useRealTimers();
  });

  it("decodes chat lines from pushed envelopes", () => {
    const line = chatLine(envelope("m1", "hello there"));
    expect(line).toEqual({ from: "a@x.test", text: "hello there", sentAt: 7 });
  });
});
