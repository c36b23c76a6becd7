"""Shared test fixtures: a ground-truth-backed predictor and tiny datasets."""

from __future__ import annotations

import numpy as np

from slideseg.postprocess import DecoderOutputs
from slideseg.prompts import Prompt
from slideseg.volume_io import Volume, VolumeMask, axis_dim


class OraclePredictor:
    """Perfect window predictor driven by the ground-truth mask.

    Windows are recognized by the byte content of their central slice (noise
    makes slices unique), honoring the contract that predictions depend only
    on window pixels and the prompt.  Hypothesis 0 carries the instance the
    prompt selects (+/- ``logit_scale`` logits); the other two hypotheses are
    junk with low predicted IoU so the quality filter has something to drop.
    """

    logit_scale = 8.0

    def __init__(self, volume: Volume, mask: VolumeMask, axes=("z",)):
        self.calls = 0
        self.batch_sizes: list[int] = []
        self._windows = {}
        for axis in axes:
            dim = axis_dim(axis)
            vox = np.moveaxis(volume.voxels, dim, 0)
            lab = np.moveaxis(mask.labels, dim, 0)
            for center in range(1, vox.shape[0] - 1):
                key = vox[center].tobytes()
                stack = np.moveaxis(lab[center - 1 : center + 2], 0, -1)
                self._windows[key] = stack
        self.mask = mask

    def _select_instance(self, central_labels: np.ndarray, prompt: Prompt) -> int:
        if prompt.points is not None:
            x, y = (int(round(v)) for v in prompt.points[0])
            return int(central_labels[y, x])
        if prompt.box is not None:
            x0, y0, x1, y1 = (int(round(v)) for v in prompt.box)
            region = central_labels[y0 : y1 + 1, x0 : x1 + 1]
            counts = np.bincount(region.ravel())
            counts[0] = 0
            if counts.max(initial=0) == 0:
                return 0
            return int(np.argmax(counts))
        return 0

    def predict(self, windows, prompts):
        self.calls += 1
        self.batch_sizes.append(len(windows))
        outputs = []
        for window, prompt in zip(windows, prompts):
            key = np.ascontiguousarray(window[:, :, 1], dtype=np.float32).tobytes()
            stack = self._windows.get(key)
            h, w = window.shape[:2]
            if stack is None:
                target = np.zeros((h, w, 3), dtype=bool)
            else:
                iid = self._select_instance(stack[:, :, 1], prompt)
                target = stack == iid if iid else np.zeros_like(stack, dtype=bool)
            logits = np.where(target, self.logit_scale, -self.logit_scale).astype(np.float32)
            junk = np.full((h, w, 3), -self.logit_scale, dtype=np.float32)
            masks = np.stack([logits, junk, junk], axis=-1)  # (H, W, 3, 3)
            outputs.append(DecoderOutputs(
                masks=masks, iou=np.array([0.95, 0.05, 0.05], dtype=np.float32)
            ))
        return outputs
