/** Draft prompt state machine: drag → box, click → point, Escape cancels.
 *
 * Coordinates are image pixels (already view-inverted and clamped by the
 * caller).  A drag whose pointer barely moved is a click; a real drag with a
 * zero-width or zero-height box is rejected with a hint, since a useful box
 * must wrap around the target.
 */

import type { PromptJson } from "./types.js";

export type Draft =
  | { kind: "none" }
  | { kind: "dragging"; x0: number; y0: number; x1: number; y1: number }
  | { kind: "box"; x0: number; y0: number; x1: number; y1: number }
  | { kind: "point"; x: number; y: number; label: 0 | 1 }
  | { kind: "invalid"; hint: string };

export const NO_DRAFT: Draft = { kind: "none" };

/** Pointer movement below this many image pixels counts as a click. */
export const CLICK_TOLERANCE = 2;

export function beginDrag(x: number, y: number): Draft {
  return { kind: "dragging", x0: x, y0: y, x1: x, y1: y };
}

export function updateDrag(draft: Draft, x: number, y: number): Draft {
  if (draft.kind !== "dragging") return draft;
  return { ...draft, x1: x, y1: y };
}

export function endDrag(draft: Draft, x: number, y: number, label: 0 | 1 = 1): Draft {
  if (draft.kind !== "dragging") return draft;
  const dx = Math.abs(x - draft.x0);
  const dy = Math.abs(y - draft.y0);
  if (dx < CLICK_TOLERANCE && dy < CLICK_TOLERANCE) {
    return { kind: "point", x: draft.x0, y: draft.y0, label };
  }
  const x0 = Math.min(draft.x0, x);
  const x1 = Math.max(draft.x0, x);
  const y0 = Math.min(draft.y0, y);
  const y1 = Math.max(draft.y0, y);
  if (x1 - x0 === 0 || y1 - y0 === 0) {
    return { kind: "invalid", hint: "box has no area — drag it around the target" };
  }
  return { kind: "box", x0, y0, x1, y1 };
}

export function cancelDraft(): Draft {
  return NO_DRAFT;
}

/** The JSON the service expects, or null when there is nothing to submit. */
export function toPromptJson(draft: Draft): PromptJson | null {
  if (draft.kind === "box") {
    return { type: "box", coords: [draft.x0, draft.y0, draft.x1, draft.y1] };
  }
  if (draft.kind === "point") {
    return { type: "point", coords: [draft.x, draft.y], label: draft.label };
  }
  return null;
}
