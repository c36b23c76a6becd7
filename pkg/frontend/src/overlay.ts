/** Pure pixel compositing of mask planes over grayscale slice renders. */

export const OVERLAY_ALPHA = 0.45;

export const INSTANCE_COLORS: ReadonlyArray<readonly [number, number, number]> = [
  [66, 135, 245],
  [240, 101, 67],
  [67, 181, 115],
  [200, 80, 200],
  [230, 180, 40],
];

export function colorFor(instanceId: number): readonly [number, number, number] {
  const palette = INSTANCE_COLORS[(instanceId - 1 + INSTANCE_COLORS.length * 1000)
    % INSTANCE_COLORS.length];
  return palette ?? [66, 135, 245];
}

/** Alpha-blend a 0/1 plane into RGBA pixels (in place). */
export function tintRgba(
  data: Uint8ClampedArray,
  plane: Uint8Array,
  color: readonly [number, number, number],
  alpha: number = OVERLAY_ALPHA,
): void {
  if (data.length !== plane.length * 4) {
    throw new Error(`rgba buffer is ${data.length} bytes for ${plane.length} pixels`);
  }
  const [r, g, b] = color;
  for (let i = 0; i < plane.length; i++) {
    if (!plane[i]) continue;
    const o = i * 4;
    data[o] = (1 - alpha) * (data[o] ?? 0) + alpha * r;
    data[o + 1] = (1 - alpha) * (data[o + 1] ?? 0) + alpha * g;
    data[o + 2] = (1 - alpha) * (data[o + 2] ?? 0) + alpha * b;
  }
}
