/** Annotation session: everything the UI shows, minus the DOM.
 *
 * Holds the viewer state (volume, axis, slice, zoom/pan, draft prompt,
 * active job, overlay visibility), talks to the service through ApiClient,
 * and never mutates masks — overlays are a pure view over job documents.
 */

import { ApiClient, ApiError } from "./api.js";
import { JobPoller, POLL_INTERVAL_MS, type PollerCallbacks } from "./poller.js";
import {
  type DecodedInstance,
  decodePayload,
  decodeRle,
  payloadPlane,
} from "./rle.js";
import {
  type Draft,
  NO_DRAFT,
  beginDrag,
  cancelDraft,
  endDrag,
  toPromptJson,
  updateDrag,
} from "./prompts.js";
import {
  DEFAULT_VIEW,
  type View,
  clampToImage,
  panBy,
  screenToImage,
  zoomAt,
} from "./view.js";
import {
  type Axis,
  type JobDoc,
  type VolumeInfo,
  planeDims,
  sliceExtent,
} from "./types.js";

export interface SessionOptions {
  intervalMs?: number;
  schedule?: (fn: () => void, ms: number) => unknown;
  cancel?: (handle: unknown) => void;
}

export interface OverlayPlane {
  instanceId: number;
  plane: Uint8Array;
}

export class AnnotationSession {
  volume: VolumeInfo | null = null;
  axis: Axis = "z";
  sliceIndex = 0;
  view: View = DEFAULT_VIEW;
  draft: Draft = NO_DRAFT;
  activeJob: JobDoc | null = null;
  /** Most recent finished job; refinement attaches to it on the same axis. */
  lastDone: JobDoc | null = null;
  toasts: string[] = [];
  hiddenInstances = new Set<number>();

  private decoded: { jobId: string; instances: DecodedInstance[] } | null = null;
  private poller: JobPoller;
  /** Bumped whenever what the canvas should show may have changed. */
  revision = 0;

  constructor(private api: ApiClient, options: SessionOptions = {}) {
    const callbacks: PollerCallbacks = {
      onUpdate: (doc) => this.handleUpdate(doc),
      onDone: (doc) => this.handleDone(doc),
      onFailed: (doc) => {
        this.toast(`job failed: ${doc.error ?? "unknown error"}`);
      },
      onNetworkTrouble: (failures) => {
        this.toast(`connection trouble: ${failures} polls failed, retrying`);
      },
    };
    this.poller = new JobPoller(
      (id) => this.api.getJob(id),
      callbacks,
      options.intervalMs ?? POLL_INTERVAL_MS,
      options.schedule,
      options.cancel,
    );
  }

  // -- volume & navigation --------------------------------------------------

  openVolume(info: VolumeInfo): void {
    this.poller.stop();
    this.volume = info;
    this.axis = "z";
    this.sliceIndex = Math.floor(sliceExtent(info.shape, "z") / 2);
    this.view = DEFAULT_VIEW;
    this.draft = NO_DRAFT;
    this.activeJob = null;
    this.lastDone = null;
    this.decoded = null;
    this.hiddenInstances.clear();
    this.revision++;
  }

  get sliceCount(): number {
    return this.volume ? sliceExtent(this.volume.shape, this.axis) : 0;
  }

  get planeSize(): [number, number] {
    return this.volume ? planeDims(this.volume.shape, this.axis) : [0, 0];
  }

  setAxis(axis: Axis): void {
    if (axis === this.axis) return;
    this.axis = axis;
    // prompts are slice-specific: switching the viewing plane drops the draft
    this.draft = NO_DRAFT;
    this.sliceIndex = Math.min(Math.max(this.sliceIndex, 0), this.sliceCount - 1);
    this.revision++;
  }

  setSlice(index: number): void {
    this.sliceIndex = Math.min(Math.max(index, 0), Math.max(this.sliceCount - 1, 0));
    this.revision++;
  }

  // -- view -------------------------------------------------------------

  wheelZoom(sx: number, sy: number, deltaY: number): void {
    this.view = zoomAt(this.view, sx, sy, deltaY < 0 ? 1.25 : 0.8);
    this.revision++;
  }

  dragPan(dx: number, dy: number): void {
    this.view = panBy(this.view, dx, dy);
    this.revision++;
  }

  // -- prompt drawing -----------------------------------------------------

  private toImage(sx: number, sy: number): { x: number; y: number } {
    const { x, y } = screenToImage(this.view, sx, sy);
    const [h, w] = this.planeSize;
    return clampToImage(x, y, h, w);
  }

  pointerDown(sx: number, sy: number): void {
    if (!this.volume) return;
    const p = this.toImage(sx, sy);
    this.draft = beginDrag(p.x, p.y);
    this.revision++;
  }

  pointerMove(sx: number, sy: number): void {
    if (this.draft.kind !== "dragging") return;
    const p = this.toImage(sx, sy);
    this.draft = updateDrag(this.draft, p.x, p.y);
    this.revision++;
  }

  pointerUp(sx: number, sy: number): void {
    if (this.draft.kind !== "dragging") return;
    const p = this.toImage(sx, sy);
    this.draft = endDrag(this.draft, p.x, p.y);
    if (this.draft.kind === "invalid") {
      this.toast(this.draft.hint);
      this.draft = NO_DRAFT;
    }
    this.revision++;
  }

  escape(): void {
    this.draft = cancelDraft();
    this.revision++;
  }

  // -- jobs ---------------------------------------------------------------

  /** Submit the draft: a fresh job, or a refinement when one is enabled. */
  async run(): Promise<JobDoc | null> {
    if (!this.volume) return null;
    const prompt = toPromptJson(this.draft);
    if (!prompt) {
      this.toast("draw a box or click a point first");
      return null;
    }
    try {
      const refining = this.lastDone !== null && this.lastDone.axis === this.axis;
      const doc = refining
        ? await this.api.refine(this.lastDone!.id, this.sliceIndex, prompt)
        : await this.api.createJob(this.volume.id, this.axis, this.sliceIndex, prompt);
      this.draft = NO_DRAFT;
      this.activeJob = doc;
      this.poller.start(doc.id);
      this.revision++;
      return doc;
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        this.toast("annotation in progress — wait for the current job");
      } else if (error instanceof ApiError) {
        this.toast(`request rejected: ${error.message}`);
      } else {
        this.toast("network error while submitting");
      }
      return null;
    }
  }

  get refineEnabled(): boolean {
    return this.lastDone !== null && this.lastDone.axis === this.axis;
  }

  private handleUpdate(doc: JobDoc): void {
    this.activeJob = doc;
    this.revision++;
  }

  private handleDone(doc: JobDoc): void {
    this.activeJob = doc;
    this.lastDone = doc;
    if (doc.result) {
      // overlays swap atomically to the newest finished job (refine lineage)
      this.decoded = { jobId: doc.id, instances: decodePayload(doc.result.mask) };
    }
    this.toast(`job ${doc.id} done: ${doc.progress.labeled} slices labeled`);
    this.revision++;
  }

  setInstanceVisible(instanceId: number, visible: boolean): void {
    if (visible) this.hiddenInstances.delete(instanceId);
    else this.hiddenInstances.add(instanceId);
    this.revision++;
  }

  /** Instances of the most recent finished job, for visibility toggles. */
  get instances(): Array<{ id: number; name: string }> {
    return (this.decoded?.instances ?? []).map(({ id, name }) => ({ id, name }));
  }

  // -- overlays -------------------------------------------------------------

  /** Mask planes to draw over the current slice (or any axis/index pair). */
  overlayPlanes(axis: Axis = this.axis, index: number = this.sliceIndex): OverlayPlane[] {
    if (!this.volume) return [];
    const out: OverlayPlane[] = [];
    const shape = this.volume.shape;
    if (this.decoded) {
      for (const inst of this.decoded.instances) {
        if (this.hiddenInstances.has(inst.id)) continue;
        const plane = instancePlane(inst, shape, axis, index);
        if (plane) out.push({ instanceId: inst.id, plane });
      }
    }
    const job = this.activeJob;
    if (out.length === 0 && job && job.status === "running" && job.partial
        && job.axis === axis) {
      const entry = job.partial[String(index)];
      if (entry) out.push({ instanceId: 1, plane: decodeRle(entry) });
    }
    return out;
  }

  private toast(message: string): void {
    this.toasts.push(message);
    this.revision++;
  }
}

/** One instance's bitmap on a slice of any axis (payload planes run along z). */
export function instancePlane(
  inst: DecodedInstance,
  shape: readonly number[],
  axis: Axis,
  index: number,
): Uint8Array | null {
  if (axis === "z") return inst.planes.get(index) ?? null;
  return payloadPlane([inst], shape, axis, index);
}
