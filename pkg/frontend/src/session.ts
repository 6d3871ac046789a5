/** Probe session state: append-only history, the active threshold, an
 *  optional fixed server seed, and single-in-flight request handling where
 *  rapid clicks coalesce to the latest coordinate. */

import type { ProbePayload, ProbeRequest } from "./types.js";

export interface ProbeEntry {
  coordinate: { x: number; y: number };
  threshold: number;
  seed?: number;
  payload: ProbePayload;
  timestamp: number;
}

export interface SessionExport {
  threshold: number;
  seed?: number;
  requests: Array<{ x: number; y: number; threshold: number; seed?: number }>;
}

export interface ProbeTransport {
  probe(request: ProbeRequest): Promise<ProbePayload>;
}

type Pending = { x: number; y: number; threshold: number };

export class ProbeSession {
  private readonly entries: ProbeEntry[] = [];
  private inFlight = false;
  private pending: Pending | null = null;
  private waiters: Array<() => void> = [];
  onResult?: (entry: ProbeEntry) => void;
  onError?: (error: unknown) => void;

  constructor(
    private readonly transport: ProbeTransport,
    public threshold: number = 0.7,
    public seed?: number,
    private readonly sampleSource?: { sampleId?: string; imageBlob?: Blob },
    private readonly now: () => number = () => Date.now(),
  ) {}

  /** Read-only view; the underlying log is append-only. */
  get history(): readonly ProbeEntry[] {
    return this.entries;
  }

  get lastEntry(): ProbeEntry | undefined {
    return this.entries[this.entries.length - 1];
  }

  /** Queue a probe; while one is in flight newer clicks replace the queued
   *  coordinate so only the latest fires. */
  probeAt(x: number, y: number, threshold: number = this.threshold): void {
    this.pending = { x, y, threshold };
    void this.drain();
  }

  /** Re-request the most recent coordinate with a new threshold. */
  setThreshold(value: number): void {
    this.threshold = value;
    const last = this.lastEntry;
    if (last) {
      this.probeAt(last.coordinate.x, last.coordinate.y, value);
    }
  }

  /** Resolves once no request is running and nothing is queued. */
  idle(): Promise<void> {
    if (!this.inFlight && this.pending === null) return Promise.resolve();
    return new Promise((resolve) => this.waiters.push(resolve));
  }

  private async drain(): Promise<void> {
    if (this.inFlight) return;
    this.inFlight = true;
    try {
      while (this.pending !== null) {
        const request = this.pending;
        this.pending = null;
        try {
          const payload = await this.transport.probe({
            x: request.x,
            y: request.y,
            threshold: request.threshold,
            seed: this.seed,
            sampleId: this.sampleSource?.sampleId,
            imageBlob: this.sampleSource?.imageBlob,
          });
          const entry: ProbeEntry = {
            coordinate: { x: request.x, y: request.y },
            threshold: request.threshold,
            seed: this.seed,
            payload,
            timestamp: this.now(),
          };
          this.entries.push(entry);
          this.onResult?.(entry);
        } catch (error) {
          this.onError?.(error);
        }
      }
    } finally {
      this.inFlight = false;
      const waiters = this.waiters;
      this.waiters = [];
      for (const resolve of waiters) resolve();
    }
  }

  /** Everything needed to reproduce the session's requests verbatim. */
  export(): SessionExport {
    return {
      threshold: this.threshold,
      seed: this.seed,
      requests: this.entries.map((e) => ({
        x: e.coordinate.x,
        y: e.coordinate.y,
        threshold: e.threshold,
        ...(e.seed !== undefined ? { seed: e.seed } : {}),
      })),
    };
  }
}

/** Replay an exported session against a transport; returns the payloads in
 *  request order. With a deterministic service and fixed seeds the results
 *  match the original session exactly. */
export async function replaySession(
  exported: SessionExport,
  transport: ProbeTransport,
  sampleSource?: { sampleId?: string; imageBlob?: Blob },
): Promise<ProbePayload[]> {
  const out: ProbePayload[] = [];
  for (const request of exported.requests) {
    out.push(
      await transport.probe({
        x: request.x,
        y: request.y,
        threshold: request.threshold,
        seed: request.seed,
        sampleId: sampleSource?.sampleId,
        imageBlob: sampleSource?.imageBlob,
      }),
    );
  }
  return out;
}
