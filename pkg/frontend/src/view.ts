/** Zoom/pan math between canvas (screen) and image pixel coordinates.
 *
 * screen = image * zoom + pan.  All functions are pure so the coordinate
 * round-trip can be tested exactly: prompts sent to the service must equal
 * the pixels the user actually pointed at, whatever the current view.
 */

export interface View {
  zoom: number;
  panX: number;
  panY: number;
}

export const DEFAULT_VIEW: View = { zoom: 1, panX: 0, panY: 0 };

export function imageToScreen(view: View, ix: number, iy: number): { x: number; y: number } {
  return { x: ix * view.zoom + view.panX, y: iy * view.zoom + view.panY };
}

export function screenToImage(view: View, sx: number, sy: number): { x: number; y: number } {
  return { x: (sx - view.panX) / view.zoom, y: (sy - view.panY) / view.zoom };
}

/** Zoom by `factor` keeping the image point under (sx, sy) fixed on screen. */
export function zoomAt(view: View, sx: number, sy: number, factor: number,
                       minZoom = 0.25, maxZoom = 16): View {
  const zoom = Math.min(maxZoom, Math.max(minZoom, view.zoom * factor));
  const anchor = screenToImage(view, sx, sy);
  return {
    zoom,
    panX: sx - anchor.x * zoom,
    panY: sy - anchor.y * zoom,
  };
}

export function panBy(view: View, dx: number, dy: number): View {
  return { ...view, panX: view.panX + dx, panY: view.panY + dy };
}

/** Clamp an image coordinate into the bounds of a (height, width) slice. */
export function clampToImage(x: number, y: number, height: number, width: number) {
  return {
    x: Math.min(Math.max(x, 0), width - 1),
    y: Math.min(Math.max(y, 0), height - 1),
  };
}
