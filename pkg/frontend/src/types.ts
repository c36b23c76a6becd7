/** JSON shapes exchanged with the annotation service (/v1). */

export type Axis = "z" | "y" | "x";

export const AXES: readonly Axis[] = ["z", "y", "x"];

export interface VolumeInfo {
  id: string;
  shape: [number, number, number];
  modality: string;
  spacing: [number, number, number];
}

export interface PromptJson {
  type: "box" | "point";
  coords: number[];
  label?: 0 | 1;
}

/** One run-length-encoded binary plane: runs alternate background/foreground,
 * starting with background (a leading 0 means the plane starts foreground). */
export interface RleEntry {
  height: number;
  width: number;
  runs: number[];
}

export interface MaskInstance {
  id: number;
  name: string;
  source: string;
  /** RLE per nonempty slice along the volume's first axis, keyed by index. */
  slices: Record<string, RleEntry>;
}

export interface MaskPayload {
  format: string;
  id: string;
  shape: number[];
  instances: MaskInstance[];
}

export interface JobResult {
  job: string;
  volume_id: string;
  axis: Axis;
  start_index: number;
  forward_reason: string;
  backward_reason: string;
  mask: MaskPayload;
}

export type JobStatus = "queued" | "running" | "done" | "failed";

export interface JobDoc {
  id: string;
  volume_id: string;
  axis: Axis;
  start_index: number;
  prompt: PromptJson;
  status: JobStatus;
  progress: { labeled: number; total: number };
  refined_from: string | null;
  /** Live per-slice masks along the job axis, present while running. */
  partial?: Record<string, RleEntry>;
  error?: string;
  result?: JobResult;
}

/** Slice plane dimensions [rows, cols] for a view axis of a (d0,d1,d2) volume. */
export function planeDims(shape: readonly number[], axis: Axis): [number, number] {
  const [d0 = 0, d1 = 0, d2 = 0] = shape;
  if (axis === "z") return [d1, d2];
  if (axis === "y") return [d0, d2];
  return [d0, d1];
}

/** Number of slices along a view axis. */
export function sliceExtent(shape: readonly number[], axis: Axis): number {
  const [d0 = 0, d1 = 0, d2 = 0] = shape;
  return axis === "z" ? d0 : axis === "y" ? d1 : d2;
}
