import type { StreamEventDoc, StreamEventKind } from "./types.js";

// Server-sent-events client with automatic reconnect. On every (re)open
// the gateway replays a snapshot before live events, so recovery after a
// drop is just "open again"; the row store deduplicates by row_id.

const EVENT_KINDS: StreamEventKind[] = [
  "snapshot", "snapshot_end", "created", "target_edited",
  "explanation_attached",
];

// The subset of EventSource the client needs, so tests can fake it.
export interface EventSourceLike {
  addEventListener(type: string, handler: (ev: { data: string }) => void): void;
  close(): void;
  onerror: ((ev: unknown) => void) | null;
}

export type EventSourceFactory = (url: string) => EventSourceLike;

export interface StreamClientOptions {
  url: string;
  onEvent: (doc: StreamEventDoc) => void;
  onStateChange?: (connected: boolean) => void;
  makeSource?: EventSourceFactory;
  retryMs?: number;
  schedule?: (fn: () => void, ms: number) => unknown;
}

export class StreamClient {
  private source: EventSourceLike | null = null;
  private closed = false;
  private readonly makeSource: EventSourceFactory;
  private readonly retryMs: number;
  private readonly schedule: (fn: () => void, ms: number) => unknown;

  constructor(private options: StreamClientOptions) {
    this.makeSource = options.makeSource
      ?? ((url) => new EventSource(url) as unknown as EventSourceLike);
    this.retryMs = options.retryMs ?? 1000;
    this.schedule = options.schedule ?? ((fn, ms) => setTimeout(fn, ms));
  }

  connect(): void {
    if (this.closed) return;
    const source = this.makeSource(this.options.url);
    this.source = source;
    for (const kind of EVENT_KINDS) {
      source.addEventListener(kind, (ev) => {
        let doc: StreamEventDoc;
        try {
          doc = JSON.parse(ev.data);
        } catch {
          return; // malformed frame, skip it
        }
        doc.event = kind;
        this.options.onEvent(doc);
        this.options.onStateChange?.(true);
      });
    }
    source.onerror = () => {
      source.close();
      if (this.source !== source || this.closed) return;
      this.source = null;
      this.options.onStateChange?.(false);
      this.schedule(() => this.connect(), this.retryMs);
    };
  }

  close(): void {
    this.closed = true;
    this.source?.close();
    this.source = null;
  }
}
