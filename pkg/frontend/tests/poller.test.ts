import { describe, expect, it } from "vitest";

import { FAILURES_BEFORE_SURFACING, JobPoller, POLL_INTERVAL_MS } from "../src/poller.js";
import type { JobDoc } from "../src/types.js";

function doc(status: JobDoc["status"], id = "job-1"): JobDoc {
  return {
    id,
    volume_id: "vol",
    axis: "z",
    start_index: 3,
    prompt: { type: "point", coords: [1, 2], label: 1 },
    status,
    progress: { labeled: 0, total: 8 },
    refined_from: null,
  };
}

interface Deferred {
  jobId: string;
  resolve: (d: JobDoc) => void;
  reject: (e: unknown) => void;
}

interface FakeTimer {
  fn: () => void;
  ms: number;
  cancelled: boolean;
  fired: boolean;
}

/** Test double: manual timers plus manually settled getJob calls. */
function harness() {
  const timers: FakeTimer[] = [];
  const calls: Deferred[] = [];
  const events: string[] = [];

  const poller = new JobPoller(
    (jobId) =>
      new Promise<JobDoc>((resolve, reject) => {
        calls.push({ jobId, resolve, reject });
      }),
    {
      onUpdate: (d) => events.push(`update:${d.status}`),
      onDone: (d) => events.push(`done:${d.id}`),
      onFailed: (d) => events.push(`failed:${d.error ?? ""}`),
      onNetworkTrouble: (n) => events.push(`trouble:${n}`),
    },
    POLL_INTERVAL_MS,
    (fn, ms) => {
      const handle: FakeTimer = { fn, ms, cancelled: false, fired: false };
      timers.push(handle);
      return handle;
    },
    (handle) => {
      (handle as FakeTimer).cancelled = true;
    },
  );

  const flush = async () => {
    for (let i = 0; i < 10; i++) await Promise.resolve();
  };
  const pending = () => timers.filter((t) => !t.cancelled && !t.fired);
  const fireNext = async () => {
    const live = pending();
    expect(live.length).toBe(1); // the poller never stacks timers
    live[0]!.fired = true;
    live[0]!.fn();
    await flush();
  };
  const lastDelay = () => timers[timers.length - 1]!.ms;

  return { poller, timers, calls, events, flush, pending, fireNext, lastDelay };
}

describe("JobPoller", () => {
  it("polls immediately, then at the base cadence while running", async () => {
    const h = harness();
    h.poller.start("job-1");
    expect(h.calls.length).toBe(1); // first poll fires with no delay
    h.calls[0]!.resolve(doc("running"));
    await h.flush();
    expect(h.events).toEqual(["update:running"]);
    expect(h.timers.length).toBe(1);
    expect(h.timers[0]!.ms).toBe(POLL_INTERVAL_MS);
    await h.fireNext();
    expect(h.calls.length).toBe(2);
  });

  it("stops and reports once on done", async () => {
    const h = harness();
    h.poller.start("job-1");
    h.calls[0]!.resolve(doc("running"));
    await h.flush();
    await h.fireNext();
    h.calls[1]!.resolve(doc("done"));
    await h.flush();
    expect(h.events).toEqual(["update:running", "update:done", "done:job-1"]);
    expect(h.poller.active).toBe(false);
    expect(h.pending().length).toBe(0); // nothing left ticking
  });

  it("reports failed jobs and stops", async () => {
    const h = harness();
    h.poller.start("job-1");
    const failed = { ...doc("failed"), error: "boom" };
    h.calls[0]!.resolve(failed);
    await h.flush();
    expect(h.events).toEqual(["update:failed", "failed:boom"]);
    expect(h.poller.active).toBe(false);
  });

  it("backs off exponentially and surfaces trouble at the third failure", async () => {
    const h = harness();
    h.poller.start("job-1");
    h.calls[0]!.resolve(doc("running"));
    await h.flush();

    const delays: number[] = [];
    for (let failure = 1; failure <= 5; failure++) {
      await h.fireNext();
      h.calls[h.calls.length - 1]!.reject(new Error("net down"));
      await h.flush();
      delays.push(h.lastDelay());
    }
    // 250 * 2^k, capped at 4000
    expect(delays).toEqual([500, 1000, 2000, 4000, 4000]);
    expect(h.events.filter((e) => e.startsWith("trouble"))).toEqual([
      `trouble:${FAILURES_BEFORE_SURFACING}`,
    ]);

    // a successful poll resets the backoff
    await h.fireNext();
    h.calls[h.calls.length - 1]!.resolve(doc("running"));
    await h.flush();
    expect(h.lastDelay()).toBe(POLL_INTERVAL_MS);
  });

  it("keeps a single request in flight across restarts", async () => {
    const h = harness();
    h.poller.start("job-1");
    expect(h.calls.length).toBe(1);

    // restart onto another job while the first request is still pending
    h.poller.start("job-2");
    expect(h.calls.length).toBe(1); // no concurrent second request

    h.calls[0]!.resolve(doc("done", "job-1"));
    await h.flush();
    // the stale response is dropped; the new job is polled right away
    expect(h.events).toEqual([]);
    expect(h.calls.length).toBe(2);
    expect(h.calls[1]!.jobId).toBe("job-2");

    h.calls[1]!.resolve(doc("done", "job-2"));
    await h.flush();
    expect(h.events).toEqual(["update:done", "done:job-2"]);
  });

  it("ignores responses that land after stop", async () => {
    const h = harness();
    h.poller.start("job-1");
    h.poller.stop();
    h.calls[0]!.resolve(doc("running"));
    await h.flush();
    expect(h.events).toEqual([]);
    expect(h.calls.length).toBe(1);
  });
});
