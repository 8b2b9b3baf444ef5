import { describe, expect, it } from "vitest";
import { StreamClient, type EventSourceLike } from "../src/sse.js";
import { RowStore } from "../src/store.js";
import type { StreamEventDoc } from "../src/types.js";
import { makeRow } from "./helpers.js";

class FakeEventSource implements EventSourceLike {
  handlers = new Map<string, Array<(ev: { data: string }) => void>>();
  onerror: ((ev: unknown) => void) | null = null;
  closed = false;

  addEventListener(type: string, handler: (ev: { data: string }) => void): void {
    const list = this.handlers.get(type) ?? [];
    list.push(handler);
    this.handlers.set(type, list);
  }

  close(): void {
    this.closed = true;
  }

  emit(type: string, doc: unknown): void {
    for (const handler of this.handlers.get(type) ?? []) {
      handler({ data: JSON.stringify(doc) });
    }
  }

  fail(): void {
    this.onerror?.(new Error("stream dropped"));
  }
}

function harness() {
  const sources: FakeEventSource[] = [];
  const pending: Array<() => void> = [];
  const events: StreamEventDoc[] = [];
  const states: boolean[] = [];
  const client = new StreamClient({
    url: "/api/stream",
    onEvent: (doc) => events.push(doc),
    onStateChange: (connected) => states.push(connected),
    makeSource: (url) => {
      expect(url).toBe("/api/stream");
      const source = new FakeEventSource();
      sources.push(source);
      return source;
    },
    schedule: (fn) => pending.push(fn),
    retryMs: 0,
  });
  const runPending = () => {
    while (pending.length) pending.shift()!();
  };
  return { client, sources, events, states, runPending };
}

describe("StreamClient", () => {
  it("delivers snapshot then live events in order", () => {
    const h = harness();
    h.client.connect();
    const source = h.sources[0];
    source.emit("snapshot", { row: makeRow(1) });
    source.emit("snapshot_end", {});
    source.emit("created", { row: makeRow(2) });
    expect(h.events.map((e) => e.event))
      .toEqual(["snapshot", "snapshot_end", "created"]);
  });

  it("reconnects after a drop and the store stays duplicate-free", () => {
    const h = harness();
    const store = new RowStore();
    h.client = new StreamClient({
      url: "/api/stream",
      onEvent: (doc) => store.apply(doc),
      makeSource: () => {
        const source = new FakeEventSource();
        h.sources.push(source);
        return source;
      },
      schedule: (fn) => { fn(); },
      retryMs: 0,
    });
    h.client.connect();
    const first = h.sources[h.sources.length - 1];
    first.emit("snapshot_end", {});
    first.emit("created", { row: makeRow(1) });
    first.emit("created", { row: makeRow(2) });
    first.fail(); // drop; schedule runs the reconnect immediately
    const second = h.sources[h.sources.length - 1];
    expect(second).not.toBe(first);
    // server replays the full snapshot on the new connection
    second.emit("snapshot", { row: makeRow(1) });
    second.emit("snapshot", { row: makeRow(2) });
    second.emit("snapshot_end", {});
    second.emit("created", { row: makeRow(3) });
    expect(store.size()).toBe(3);
    expect(store.all().map((vm) => vm.row.row_id)).toEqual([1, 2, 3]);
  });

  it("reports connection state transitions", () => {
    const h = harness();
    h.client.connect();
    h.sources[0].emit("snapshot_end", {});
    h.sources[0].fail();
    expect(h.states[0]).toBe(true);
    expect(h.states[h.states.length - 1]).toBe(false);
  });

  it("close() stops reconnect attempts", () => {
    const h = harness();
    h.client.connect();
    h.client.close();
    expect(h.sources[0].closed).toBe(true);
    h.sources[0].fail();
    h.runPending();
    expect(h.sources).toHaveLength(1);
  });

  it("skips malformed frames without dying", () => {
    const h = harness();
    h.client.connect();
    const source = h.sources[0];
    for (const handler of source.handlers.get("created") ?? []) {
      handler({ data: "{not json" });
    }
    source.emit("created", { row: makeRow(1) });
    expect(h.events).toHaveLength(1);
  });
});
