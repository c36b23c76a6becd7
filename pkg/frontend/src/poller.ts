/** Polls one job until it settles: 250 ms cadence, at most one request in
 * flight, exponential backoff on network errors, trouble surfaced after 3
 * consecutive failures (polling still continues until stopped). */

import type { JobDoc } from "./types.js";

export const POLL_INTERVAL_MS = 250;
export const FAILURES_BEFORE_SURFACING = 3;
const MAX_BACKOFF_MS = 4000;

export interface PollerCallbacks {
  /** Every successful poll, including the final one. */
  onUpdate?: (doc: JobDoc) => void;
  onDone?: (doc: JobDoc) => void;
  onFailed?: (doc: JobDoc) => void;
  /** Called once consecutive network failures reach the surfacing threshold. */
  onNetworkTrouble?: (consecutiveFailures: number, error: unknown) => void;
}

type Schedule = (fn: () => void, ms: number) => unknown;
type Cancel = (handle: unknown) => void;

export class JobPoller {
  private jobId: string | null = null;
  private timer: unknown = null;
  private inFlight = false;
  private failures = 0;
  /** Invalidates responses that were in flight across a stop()/start(). */
  private generation = 0;

  constructor(
    private getJob: (id: string) => Promise<JobDoc>,
    private callbacks: PollerCallbacks,
    private intervalMs: number = POLL_INTERVAL_MS,
    private schedule: Schedule = (fn, ms) => setTimeout(fn, ms),
    private cancel: Cancel = (handle) => clearTimeout(handle as Parameters<typeof clearTimeout>[0]),
  ) {}

  get active(): boolean {
    return this.jobId !== null;
  }

  start(jobId: string): void {
    this.stop();
    this.jobId = jobId;
    this.failures = 0;
    void this.pollOnce();
  }

  stop(): void {
    if (this.timer !== null) {
      this.cancel(this.timer);
      this.timer = null;
    }
    this.jobId = null;
    this.failures = 0;
    this.generation++;
  }

  private scheduleNext(): void {
    if (this.jobId === null) return;
    const backoff = this.intervalMs * 2 ** this.failures;
    const delay = Math.min(backoff, MAX_BACKOFF_MS);
    this.timer = this.schedule(() => {
      this.timer = null;
      void this.pollOnce();
    }, delay);
  }

  private async pollOnce(): Promise<void> {
    if (this.jobId === null || this.inFlight) return;
    const jobId = this.jobId;
    const generation = this.generation;
    this.inFlight = true;
    try {
      const doc = await this.getJob(jobId);
      this.inFlight = false;
      if (this.stale(generation)) return;
      this.failures = 0;
      this.callbacks.onUpdate?.(doc);
      if (doc.status === "done") {
        this.stop();
        this.callbacks.onDone?.(doc);
        return;
      }
      if (doc.status === "failed") {
        this.stop();
        this.callbacks.onFailed?.(doc);
        return;
      }
    } catch (error) {
      this.inFlight = false;
      if (this.stale(generation)) return;
      this.failures += 1;
      if (this.failures === FAILURES_BEFORE_SURFACING) {
        this.callbacks.onNetworkTrouble?.(this.failures, error);
      }
    }
    this.scheduleNext();
  }

  /** A response from a previous start() is dropped; if a new job replaced it
   * while the request was pending, its deferred first poll fires now. */
  private stale(generation: number): boolean {
    if (generation === this.generation) return false;
    if (this.jobId !== null) void this.pollOnce();
    return true;
  }
}
