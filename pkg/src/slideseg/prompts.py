"""Prompt containers shared by training, inference and the service."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidPromptError


@dataclass
class Prompt:
    """User guidance for one window, in pixel coordinates of the middle slice.

    Attributes:
        points: ``(N, 2)`` array of ``(x, y)`` click locations, or None.
        point_labels: ``(N,)`` array, 1 for foreground clicks, 0 for background.
        box: inclusive ``(x0, y0, x1, y1)`` bounding box, or None.
        mask: optional coarse ``(H, W, 3)`` mask prompt.
    """

    points: np.ndarray | None = None
    point_labels: np.ndarray | None = None
    box: tuple[float, float, float, float] | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.points is not None:
            self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
            if self.points.ndim != 2 or self.points.shape[1] != 2:
                raise InvalidPromptError(f"points must be (N, 2), got {self.points.shape}")
            if self.point_labels is None:
                self.point_labels = np.ones(len(self.points), dtype=np.int64)
            else:
                self.point_labels = np.asarray(self.point_labels, dtype=np.int64).ravel()
            if len(self.point_labels) != len(self.points):
                raise InvalidPromptError("point_labels length must match points")
            if not np.isin(self.point_labels, (0, 1)).all():
                raise InvalidPromptError("point labels must be 0 or 1")
        elif self.point_labels is not None:
            raise InvalidPromptError("point_labels given without points")
        if self.box is not None:
            box = tuple(float(v) for v in self.box)
            if len(box) != 4:
                raise InvalidPromptError(f"box must have 4 coordinates, got {self.box}")
            if box[2] < box[0] or box[3] < box[1]:
                raise InvalidPromptError(f"box corners out of order: {box}")
            self.box = box
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float32)
            if self.mask.ndim != 3 or self.mask.shape[2] != 3:
                raise InvalidPromptError(f"mask prompt must be (H, W, 3), got {self.mask.shape}")
        if self.points is None and self.box is None and self.mask is None:
            raise InvalidPromptError("prompt must carry at least one of points/box/mask")

    def validate_bounds(self, height: int, width: int) -> None:
        """Raise if any coordinate falls outside the ``height x width`` slice."""
        if self.points is not None:
            x, y = self.points[:, 0], self.points[:, 1]
            if (x < 0).any() or (y < 0).any() or (x > width - 1).any() or (y > height - 1).any():
                raise InvalidPromptError(
                    f"point outside {width}x{height} slice: {self.points.tolist()}"
                )
        if self.box is not None:
            x0, y0, x1, y1 = self.box
            if x0 < 0 or y0 < 0 or x1 > width - 1 or y1 > height - 1:
                raise InvalidPromptError(f"box {self.box} outside {width}x{height} slice")

    def scaled(self, sx: float, sy: float) -> "Prompt":
        """Rescale coordinates, e.g. from native slice size to model size."""
        points = None if self.points is None else self.points * np.array([sx, sy])
        labels = None if self.points is None else self.point_labels.copy()
        box = None
        if self.box is not None:
            x0, y0, x1, y1 = self.box
            box = (x0 * sx, y0 * sy, x1 * sx, y1 * sy)
        return Prompt(points=points, point_labels=labels, box=box, mask=self.mask)
