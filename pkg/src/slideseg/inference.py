"""Sliding-window propagation of window predictions through a volume.

One prompt on one slice seeds a 3-slice window; the predicted masks at the
window's outer slices become box prompts for the next windows in each
direction, until a prediction dies out or the volume boundary is reached.
Batching across pending windows is a pure throughput knob: predictions are
computed per window, so results never depend on ``max_batch``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import cv2
import numpy as np

from .errors import InvalidInputError
from .postprocess import (
    DecoderOutputs,
    InstanceMask,
    filter_predictions,
    mask_nms,
    mask_to_bbox,
    morphological_open,
)
from .prompts import Prompt
from .volume_io import Volume, VolumeMask, axis_dim, take_window

TERMINATED_EMPTY = "empty_mask"
TERMINATED_BOUNDARY = "boundary"
TERMINATED_MAX_STEPS = "max_steps"
NOT_RUN = "not_run"


class WindowPredictor(Protocol):
    """Anything that can score a batch of (window, prompt) pairs."""

    def predict(self, windows: list[np.ndarray], prompts: list[Prompt]) -> list[DecoderOutputs]:
        ...


class ModelPredictor:
    """Adapts a trained model to native-resolution windows.

    Windows are resized to the model's square input with bilinear
    interpolation, prompt coordinates are scaled along, and the predicted
    logits are resized back to the native slice shape before binarization.
    """

    def __init__(self, model, device: str = "cpu"):
        import torch

        self._torch = torch
        self.model = model.to(device).eval()
        self.device = device
        self.size = model.config.image_size

    def predict(self, windows: list[np.ndarray], prompts: list[Prompt]) -> list[DecoderOutputs]:
        torch = self._torch
        if len(windows) != len(prompts):
            raise InvalidInputError("windows and prompts must pair up")
        if not windows:
            return []
        shapes = [w.shape[:2] for w in windows]
        scaled_prompts = []
        batch = np.empty((len(windows), 3, self.size, self.size), dtype=np.float32)
        for i, (window, prompt) in enumerate(zip(windows, prompts)):
            h, w = shapes[i]
            prompt.validate_bounds(h, w)
            resized = window if (h, w) == (self.size, self.size) else cv2.resize(
                np.asarray(window, dtype=np.float32), (self.size, self.size),
                interpolation=cv2.INTER_LINEAR,
            )
            batch[i] = resized.transpose(2, 0, 1)
            sx = (self.size - 1) / (w - 1) if w > 1 else 1.0
            sy = (self.size - 1) / (h - 1) if h > 1 else 1.0
            scaled = prompt.scaled(sx, sy)
            if scaled.mask is not None and scaled.mask.shape[:2] != (self.size, self.size):
                scaled.mask = cv2.resize(scaled.mask, (self.size, self.size),
                                         interpolation=cv2.INTER_LINEAR)
            scaled_prompts.append(scaled)
        with torch.no_grad():
            masks, ious = self.model(torch.from_numpy(batch), scaled_prompts)
        masks = masks.numpy()
        ious = ious.numpy()
        outputs = []
        for i, (h, w) in enumerate(shapes):
            m = masks[i]  # (size, size, S, J)
            if (h, w) != (self.size, self.size):
                s, j = m.shape[2], m.shape[3]
                flat = m.reshape(self.size, self.size, s * j)
                flat = cv2.resize(flat, (w, h), interpolation=cv2.INTER_LINEAR)
                m = flat.reshape(h, w, s, j)
            outputs.append(DecoderOutputs(masks=m, iou=ious[i]))
        return outputs


def batch_windows(pending: list, max_batch: int) -> list[list]:
    """Chunk pending work without reordering it."""
    if max_batch < 1:
        raise InvalidInputError("max_batch must be >= 1")
    return [pending[i : i + max_batch] for i in range(0, len(pending), max_batch)]


def sample_uncovered_points(shape: tuple[int, int], covered: list[np.ndarray],
                            grid_step: int) -> np.ndarray:
    """Centered grid of ``(x, y)`` probe points avoiding covered regions."""
    if grid_step < 1:
        raise InvalidInputError("grid_step must be >= 1")
    h, w = shape
    ys = np.arange(grid_step // 2, h, grid_step)
    xs = np.arange(grid_step // 2, w, grid_step)
    union = None
    for mask in covered:
        union = mask.astype(bool) if union is None else (union | mask.astype(bool))
    points = []
    for y in ys:
        for x in xs:
            if union is not None and union[y, x]:
                continue
            points.append((int(x), int(y)))
    return np.asarray(points, dtype=np.int64).reshape(-1, 2)


@dataclass
class PropagationState:
    """Bookkeeping for one travel direction of the sliding window."""

    direction: int  # +1 forward, -1 backward
    center: int | None = None  # next window center, None when finished
    prompt: Prompt | None = None
    reason: str = NOT_RUN
    steps: int = 0


@dataclass
class SegmentationResult:
    mask: VolumeMask
    axis: str
    start_index: int
    forward_reason: str
    backward_reason: str
    windows_run: int = 0
    notes: list[str] = field(default_factory=list)


def _best_window_mask(outputs: DecoderOutputs, iou_min: float, stab_min: float):
    survivors = filter_predictions(outputs, iou_min=iou_min, stab_min=stab_min)
    if not survivors:
        return None
    best = max(survivors, key=lambda s: s.score)
    if not best.pixels.any():
        return None
    return best


def propagate_step(window_pixels: np.ndarray, state: PropagationState, depth: int,
                   open_iterations: int, stride: int) -> None:
    """Advance one direction from a window's end-slice prediction.

    The end slice in the travel direction is denoised with a morphological
    opening; an empty result terminates the direction, otherwise the opened
    mask's bounding box becomes the next window's prompt and the window
    re-centers on that end slice.
    """
    end_channel = 2 if state.direction > 0 else 0
    end_index = state.center + state.direction
    end_mask = window_pixels[:, :, end_channel]
    opened = morphological_open(end_mask, iterations=open_iterations)
    if not opened.any():
        state.center = None
        state.reason = TERMINATED_EMPTY
        return
    if end_index <= 0 or end_index >= depth - 1:
        state.center = None
        state.reason = TERMINATED_BOUNDARY
        return
    state.prompt = Prompt(box=mask_to_bbox(opened))
    state.center = end_index + (stride - 1) * state.direction
    if not 1 <= state.center <= depth - 2:
        state.center = None
        state.reason = TERMINATED_BOUNDARY


def segment_volume(volume: Volume, axis: str, start_index: int, prompt: Prompt,
                   predictor: WindowPredictor, *, max_batch: int = 4,
                   iou_min: float = 0.4, stab_min: float = 0.6,
                   open_iterations: int = 1, stride: int = 1,
                   max_steps: int | None = None,
                   progress_cb=None) -> SegmentationResult:
    """Segment one instance through the whole volume from a single prompt.

    Args:
        volume: the (already display-normalized) volume to segment.
        axis: slicing axis name.
        start_index: interior slice carrying the prompt.
        prompt: seed prompt in native pixel coordinates of that slice.
        predictor: model adapter used for every window.
        max_batch: throughput-only batching bound; results are identical for
            any value >= 1.
        progress_cb: optional ``f(slice_index, mask2d)`` called whenever a
            slice's accumulated mask grows.

    Returns:
        A :class:`SegmentationResult` whose mask uses instance id 1.  An
        empty prediction at the seed window yields an empty mask with a
        diagnostic note instead of an error.
    """
    dim = axis_dim(axis)
    depth = volume.voxels.shape[dim]
    if not 1 <= start_index <= depth - 2:
        raise InvalidInputError(
            f"start_index {start_index} outside interior [1, {depth - 2}] of axis {axis}"
        )
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    if max_steps is None:
        max_steps = depth
    plane_shape = tuple(s for i, s in enumerate(volume.voxels.shape) if i != dim)
    prompt.validate_bounds(*plane_shape)

    labels = np.zeros(volume.voxels.shape, dtype=np.int32)
    planes = np.moveaxis(labels, dim, 0)  # writable view
    windows_run = 0

    def accumulate(center: int, stack: np.ndarray) -> None:
        for offset in (-1, 0, 1):
            idx = center + offset
            plane = stack[:, :, offset + 1]
            if not plane.any():
                continue
            before = planes[idx].any()
            grew = bool((plane & (planes[idx] == 0)).any())
            planes[idx][plane] = 1
            if progress_cb is not None and (grew or not before):
                progress_cb(idx, planes[idx] > 0)

    seed_window = take_window(volume, axis, start_index)
    outputs = predictor.predict([seed_window], [prompt])[0]
    windows_run += 1
    best = _best_window_mask(outputs, iou_min, stab_min)
    if best is None:
        return SegmentationResult(
            mask=VolumeMask(labels, {}),
            axis=axis, start_index=start_index,
            forward_reason=TERMINATED_EMPTY, backward_reason=TERMINATED_EMPTY,
            windows_run=windows_run,
            notes=["seed window produced no usable prediction"],
        )
    accumulate(start_index, best.pixels)

    states = {
        +1: PropagationState(direction=+1, center=start_index),
        -1: PropagationState(direction=-1, center=start_index),
    }
    for state in states.values():
        propagate_step(best.pixels, state, depth, open_iterations, stride)
        state.steps += 1

    while True:
        live = [s for s in states.values() if s.center is not None]
        if not live:
            break
        pending = [(s, take_window(volume, axis, s.center), s.prompt) for s in live]
        for chunk in batch_windows(pending, max_batch):
            results = predictor.predict([w for _, w, _ in chunk], [p for _, _, p in chunk])
            windows_run += len(chunk)
            for (state, _, _), outputs in zip(chunk, results):
                best = _best_window_mask(outputs, iou_min, stab_min)
                if best is None:
                    state.center = None
                    state.reason = TERMINATED_EMPTY
                    continue
                accumulate(state.center, best.pixels)
                propagate_step(best.pixels, state, depth, open_iterations, stride)
                state.steps += 1
                if state.center is not None and state.steps >= max_steps:
                    state.center = None
                    state.reason = TERMINATED_MAX_STEPS

    instances = {1: {"name": "instance-1", "source": "predicted"}} if labels.any() else {}
    return SegmentationResult(
        mask=VolumeMask(labels, instances),
        axis=axis, start_index=start_index,
        forward_reason=states[+1].reason, backward_reason=states[-1].reason,
        windows_run=windows_run,
    )


def segment_everything(volume: Volume, axis: str, start_index: int,
                       predictor: WindowPredictor, *, grid_step: int = 16,
                       nms_thresh: float = 0.7, max_instances: int = 16,
                       **segment_kwargs) -> tuple[VolumeMask, list[SegmentationResult]]:
    """Probe a grid of points on one slice and propagate every distinct hit.

    Points falling inside an already-covered region are skipped; surviving
    seed predictions are deduplicated with box NMS before propagation.  Later
    instances only claim voxels no earlier instance labeled.
    """
    dim = axis_dim(axis)
    depth = volume.voxels.shape[dim]
    if not 1 <= start_index <= depth - 2:
        raise InvalidInputError(f"start_index {start_index} outside interior of axis {axis}")
    window = take_window(volume, axis, start_index)
    h, w = window.shape[:2]
    iou_min = segment_kwargs.get("iou_min", 0.4)
    stab_min = segment_kwargs.get("stab_min", 0.6)

    covered: list[np.ndarray] = []
    candidates: list[tuple[InstanceMask, Prompt]] = []
    for x, y in sample_uncovered_points((h, w), [], grid_step):
        if any(c[y, x] for c in covered):
            continue
        probe = Prompt(points=np.array([[float(x), float(y)]]), point_labels=np.array([1]))
        outputs = predictor.predict([window], [probe])[0]
        best = _best_window_mask(outputs, iou_min, stab_min)
        if best is None:
            continue
        central = best.reference_plane()
        if not central.any():
            continue
        covered.append(central)
        candidates.append((best, probe))

    survivors = mask_nms([c[0] for c in candidates], iou_thresh=nms_thresh)
    keep = {id(s) for s in survivors[:max_instances]}
    chosen = [(m, p) for m, p in candidates if id(m) in keep]

    labels = np.zeros(volume.voxels.shape, dtype=np.int32)
    instances: dict[int, dict] = {}
    results = []
    next_id = 1
    for mask, probe in chosen:
        result = segment_volume(volume, axis, start_index, probe, predictor, **segment_kwargs)
        results.append(result)
        pred = result.mask.labels > 0
        claim = pred & (labels == 0)
        if not claim.any():
            continue
        labels[claim] = next_id
        instances[next_id] = {"name": f"instance-{next_id}", "source": "predicted"}
        next_id += 1
    return VolumeMask(labels, instances), results
