/** Run-length codec for binary mask planes, matching the service contract:
 * row-major pixels, runs alternating background/foreground starting with
 * background, total run length equal to height*width. */

import type { Axis, MaskPayload, RleEntry } from "./types.js";

/** Decode one plane to a row-major 0/1 byte array of length height*width. */
export function decodeRle(entry: RleEntry): Uint8Array {
  const { height, width, runs } = entry;
  const size = height * width;
  const out = new Uint8Array(size);
  let pos = 0;
  let value = 0;
  for (const run of runs) {
    if (run < 0 || !Number.isInteger(run)) {
      throw new Error(`invalid run length ${run}`);
    }
    if (value === 1) out.fill(1, pos, pos + run);
    pos += run;
    value ^= 1;
  }
  if (pos !== size) {
    throw new Error(`runs sum to ${pos}, expected ${size}`);
  }
  return out;
}

/** Encode a row-major 0/1 plane; inverse of decodeRle. */
export function encodeRle(plane: Uint8Array, height: number, width: number): RleEntry {
  if (plane.length !== height * width) {
    throw new Error(`plane has ${plane.length} pixels, expected ${height * width}`);
  }
  const runs: number[] = [];
  let value = 0;
  let run = 0;
  for (let i = 0; i < plane.length; i++) {
    const bit = plane[i] ? 1 : 0;
    if (bit === value) {
      run += 1;
    } else {
      runs.push(run);
      value = bit;
      run = 1;
    }
  }
  if (plane.length > 0) runs.push(run);
  return { height, width, runs };
}

/** A finished job's mask decoded into per-instance z-plane bitmaps. */
export interface DecodedInstance {
  id: number;
  name: string;
  /** Row-major (H,W) bitmaps keyed by index along the volume's first axis. */
  planes: Map<number, Uint8Array>;
}

export function decodePayload(payload: MaskPayload): DecodedInstance[] {
  return payload.instances.map((inst) => {
    const planes = new Map<number, Uint8Array>();
    for (const [key, entry] of Object.entries(inst.slices)) {
      planes.set(Number(key), decodeRle(entry));
    }
    return { id: inst.id, name: inst.name, planes };
  });
}

/** Union bitmap of all instances on one slice of any view axis.
 *
 * Payload planes run along the volume's first axis (z). Other axes are
 * re-sliced from the stored planes; desk-scale volumes make this cheap.
 * Returns null when no instance touches the slice.
 */
export function payloadPlane(
  decoded: DecodedInstance[],
  shape: readonly number[],
  axis: Axis,
  index: number,
): Uint8Array | null {
  const [, d1 = 0, d2 = 0] = shape;
  const h = d1;
  const w = d2;
  let out: Uint8Array | null = null;
  if (axis === "z") {
    for (const inst of decoded) {
      const plane = inst.planes.get(index);
      if (!plane) continue;
      out ??= new Uint8Array(h * w);
      for (let i = 0; i < plane.length; i++) if (plane[i]) out[i] = 1;
    }
    return out;
  }
  for (const inst of decoded) {
    for (const [z, plane] of inst.planes) {
      if (axis === "y") {
        // rows are z, columns are x; fixed y = index
        for (let x = 0; x < w; x++) {
          if (plane[index * w + x]) {
            out ??= new Uint8Array(sizeFor(shape, axis));
            out[z * w + x] = 1;
          }
        }
      } else {
        // axis x: rows are z, columns are y; fixed x = index
        for (let y = 0; y < h; y++) {
          if (plane[y * w + index]) {
            out ??= new Uint8Array(sizeFor(shape, axis));
            out[z * h + y] = 1;
          }
        }
      }
    }
  }
  return out;
}

function sizeFor(shape: readonly number[], axis: Axis): number {
  const [d0 = 0, d1 = 0, d2 = 0] = shape;
  return axis === "y" ? d0 * d2 : d0 * d1;
}
