"""Mask post-processing: stability scoring, quality filtering, boxes, NMS.

All predictions flow through here before anything is written to disk or fed
back into the sliding window, so the binarization threshold and quality gates
live in this module and nowhere else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError

BINARIZE_THRESHOLD = 0.0  # logits strictly above this are foreground
STABILITY_DELTA = 0.1
IOU_MIN = 0.4
STABILITY_MIN = 0.6
NMS_IOU = 0.7

_CONN8 = np.ones((3, 3), dtype=bool)


@dataclass
class DecoderOutputs:
    """Numpy-side model output for a single window.

    ``masks`` holds logits shaped ``(H, W, S, J)`` for S slices and J
    hypotheses; ``iou`` is the ``(J,)`` vector of predicted mask IoUs.
    """

    masks: np.ndarray
    iou: np.ndarray

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float32)
        self.iou = np.asarray(self.iou, dtype=np.float32).ravel()
        if self.masks.ndim != 4:
            raise InvalidInputError(f"decoder masks must be (H, W, S, J), got {self.masks.shape}")
        if self.masks.shape[3] != self.iou.shape[0]:
            raise InvalidInputError(
                f"{self.masks.shape[3]} hypotheses but {self.iou.shape[0]} IoU predictions"
            )


@dataclass
class InstanceMask:
    """One binarized prediction with its quality scores.

    ``pixels`` is boolean, either ``(H, W)`` or an ``(H, W, S)`` slice stack.
    ``bbox`` is the tight inclusive box of the largest connected component on
    the reference plane (the central slice for stacks), or None when empty.
    """

    pixels: np.ndarray
    score: float
    stability: float
    bbox: tuple[int, int, int, int] | None

    def reference_plane(self) -> np.ndarray:
        if self.pixels.ndim == 2:
            return self.pixels
        return self.pixels[:, :, self.pixels.shape[2] // 2]


def stability_score(logits: np.ndarray, delta: float = STABILITY_DELTA,
                    tau: float = BINARIZE_THRESHOLD) -> float:
    """Area ratio of the mask thresholded at ``tau + delta`` vs ``tau - delta``.

    Returns 0 when even the loose threshold selects nothing: a mask that
    vanishes under a tiny threshold shift is maximally unstable, and an empty
    prediction has no stability to speak of.
    """
    logits = np.asarray(logits)
    hi = int(np.count_nonzero(logits > tau + delta))
    lo = int(np.count_nonzero(logits > tau - delta))
    if lo == 0:
        return 0.0
    return hi / lo


def mask_to_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight inclusive ``(x0, y0, x1, y1)`` box of the largest 8-connected blob.

    Ties on component size resolve to the component labeled first (scan
    order).  Returns None for an empty mask.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise InvalidInputError(f"mask_to_bbox expects 2-D, got shape {m.shape}")
    if not m.any():
        return None
    labeled, count = ndimage.label(m, structure=_CONN8)
    if count > 1:
        sizes = np.bincount(labeled.ravel())[1:]
        m = labeled == (int(np.argmax(sizes)) + 1)
    ys, xs = np.nonzero(m)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def bbox_iou(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    """IoU of two inclusive pixel boxes."""
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = ix1 - ix0 + 1, iy1 - iy0 + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def mask_nms(masks: list[InstanceMask], iou_thresh: float = NMS_IOU) -> list[InstanceMask]:
    """Greedy NMS on bounding boxes, highest score first.

    A candidate is suppressed when its box overlaps an already kept box with
    IoU strictly above ``iou_thresh``.  Empty masks (no box) never overlap
    anything and are always kept.  Score ties keep input order, so the result
    is independent of input order up to ties.
    """
    order = sorted(range(len(masks)), key=lambda i: (-masks[i].score, i))
    kept: list[int] = []
    for i in order:
        box = masks[i].bbox
        if box is not None and any(
            masks[k].bbox is not None and bbox_iou(box, masks[k].bbox) > iou_thresh
            for k in kept
        ):
            continue
        kept.append(i)
    kept.sort()
    return [masks[i] for i in kept]


def morphological_open(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Binary opening with a 3x3 structuring element.

    Removes speckles smaller than the element while leaving solid regions
    untouched; the result is always a subset of the input.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise InvalidInputError(f"morphological_open expects 2-D, got shape {m.shape}")
    if iterations < 1:
        raise InvalidInputError("iterations must be >= 1")
    return ndimage.binary_opening(m, structure=_CONN8, iterations=iterations)


def filter_predictions(outputs: DecoderOutputs, iou_min: float = IOU_MIN,
                       stab_min: float = STABILITY_MIN) -> list[InstanceMask]:
    """Quality-gate decoder hypotheses and binarize the survivors.

    A hypothesis is dropped when its predicted IoU is strictly below
    ``iou_min`` or its stability score is strictly below ``stab_min``.
    Survivors binarize at logit > 0; single-slice outputs come back as 2-D
    masks, multi-slice outputs keep their slice stack.
    """
    survivors: list[InstanceMask] = []
    n_slices = outputs.masks.shape[2]
    for j in range(outputs.masks.shape[3]):
        u = float(outputs.iou[j])
        if u < iou_min:
            continue
        logits = outputs.masks[:, :, :, j]
        stab = stability_score(logits)
        if stab < stab_min:
            continue
        pixels = logits > BINARIZE_THRESHOLD
        if n_slices == 1:
            pixels = pixels[:, :, 0]
            reference = pixels
        else:
            reference = pixels[:, :, n_slices // 2]
        survivors.append(InstanceMask(pixels=pixels, score=u, stability=stab,
                                      bbox=mask_to_bbox(reference)))
    return survivors
