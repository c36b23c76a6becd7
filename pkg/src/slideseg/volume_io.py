"""Volume containers, intensity normalization, window extraction and mask I/O.

A volume is a 3-D scalar grid with axes ordered ``(z, y, x)``.  Slice windows
are stacks of three adjacent slices pulled out along one axis; they are the
unit every model forward pass operates on.  Masks are persisted as per-slice
run-length encodings in a single JSON document next to the raw voxel file.

On-disk layout for a volume with id ``abc``::

    abc.vol.raw    little-endian voxel buffer, C order
    abc.vol.json   sidecar: shape, spacing, modality, dtype
    abc.mask.rle.json   optional instance masks
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .errors import ConfigError, CorruptDataError, InvalidInputError

MODALITIES = ("CT", "MRI", "SYNTH")

# Raw-unit display windows mapped onto [0, 255].  SYNTH volumes are assumed
# to already live in display range and pass through untouched.
INTENSITY_WINDOWS = {"CT": (-200.0, 400.0), "MRI": (0.0, 600.0)}

# A window is kept for training only if the instance covers at least this
# fraction of the central slice.
MIN_AREA_FRACTION = 0.0014

AXES = ("z", "y", "x")
_AXIS_DIM = {"z": 0, "y": 1, "x": 2}

# numpy dtype -> explicit little-endian codes accepted in sidecar files
DTYPE_CODES = {
    "uint8": "<u1",
    "int16": "<i2",
    "int32": "<i4",
    "float32": "<f4",
    "float64": "<f8",
}


def axis_dim(axis: str) -> int:
    """Array dimension sliced by ``axis``; raises on unknown axis names."""
    try:
        return _AXIS_DIM[axis]
    except KeyError:
        raise InvalidInputError(f"unknown axis {axis!r}, expected one of {AXES}")


@dataclass
class Volume:
    """Scalar voxel grid plus the metadata needed to interpret it.

    Attributes:
        voxels: ``(D_z, D_y, D_x)`` array of raw or normalized intensities.
        spacing: physical voxel size ``(sx, sy, sz)`` in millimetres.
        modality: one of ``CT``, ``MRI``, ``SYNTH``.
        id: stable identifier used for file names and service routes.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = "SYNTH"
    id: str = "volume"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise InvalidInputError(f"volume must be 3-D, got shape {self.voxels.shape}")
        if min(self.voxels.shape) < 3:
            raise InvalidInputError(
                f"every volume dimension must be >= 3, got {self.voxels.shape}"
            )
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InvalidInputError(f"spacing must be three positive floats, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise InvalidInputError(f"unknown modality {self.modality!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def extent(self, axis: str) -> int:
        """Number of slices along ``axis``."""
        return self.voxels.shape[axis_dim(axis)]

    def spacing_along(self, axis: str) -> float:
        # spacing is stored (sx, sy, sz) while voxels are (z, y, x)
        return self.spacing[2 - axis_dim(axis)]


@dataclass
class VolumeMask:
    """Integer instance labels aligned with a volume; 0 is background."""

    labels: np.ndarray
    instances: dict[int, dict] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise InvalidInputError(f"mask must be 3-D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise InvalidInputError("mask labels must be integer typed")

    def ids(self) -> list[int]:
        """Sorted instance ids present in the label grid."""
        present = np.unique(self.labels)
        return [int(i) for i in present if i != 0]

    def binary(self, instance_id: int | None = None) -> np.ndarray:
        if instance_id is None:
            return self.labels > 0
        return self.labels == instance_id


@dataclass
class SliceWindow:
    """Three adjacent slices with optional per-slice labels.

    ``pixels`` is ``(H, W, 3)`` float32 in display range ``[0, 255]``; channel
    order follows increasing slice index along the extraction axis.
    ``indicator[i] == 1`` marks channel ``i`` as carrying usable supervision.
    """

    pixels: np.ndarray
    axis: str = "z"
    center_index: int = 1
    labels: np.ndarray | None = None
    indicator: tuple[int, int, int] = (1, 1, 1)
    volume_id: str = ""
    instance_id: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InvalidInputError(f"window pixels must be (H, W, 3), got {self.pixels.shape}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 255.0:
            raise InvalidInputError(f"window pixels out of [0, 255]: [{lo}, {hi}]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(bool)
            if self.labels.shape != self.pixels.shape:
                raise InvalidInputError("window labels must match pixel shape")
        ind = tuple(int(v) for v in self.indicator)
        if len(ind) != 3 or any(v not in (0, 1) for v in ind):
            raise InvalidInputError(f"indicator must be three 0/1 flags, got {self.indicator}")
        if any(ind) and self.labels is None:
            raise InvalidInputError("indicator marks labeled slices but window has no labels")
        self.indicator = ind

    @property
    def slice_shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def clip_and_normalize(volume: Volume) -> Volume:
    """Map raw intensities into the display range ``[0, 255]``.

    CT values are clamped to ``[-200, 400]`` and MRI to ``[0, 600]`` before an
    affine map onto ``[0, 255]`` with round-half-away-from-zero.  The mapping
    uses the fixed modality window, not the per-volume min/max, so identical
    raw values normalize identically across volumes.  SYNTH volumes are
    returned unchanged, which makes the operation idempotent.
    """
    if volume.modality == "SYNTH":
        return volume
    lo, hi = INTENSITY_WINDOWS[volume.modality]
    x = np.clip(volume.voxels.astype(np.float64), lo, hi)
    # divide before scaling so exact midpoints stay exact (e.g. CT 100 -> 127.5)
    y = np.floor((x - lo) / (hi - lo) * 255.0 + 0.5)
    return Volume(y.astype(np.float32), volume.spacing, "SYNTH", volume.id)


def extract_windows(volume: Volume, mask: VolumeMask, axis: str = "z") -> list[SliceWindow]:
    """Enumerate labeled 3-slice training windows along ``axis``.

    One window is produced per (interior slice, instance) pair where the
    instance covers at least ``MIN_AREA_FRACTION`` of the central slice.
    Labels are the binary mask of that single instance on all three slices;
    the central slice is always marked supervised.
    """
    if mask.labels.shape != volume.voxels.shape:
        raise InvalidInputError(
            f"mask shape {mask.labels.shape} does not match volume {volume.voxels.shape}"
        )
    dim = axis_dim(axis)
    vox = np.moveaxis(volume.voxels, dim, 0)
    lab = np.moveaxis(mask.labels, dim, 0)
    depth, h, w = vox.shape
    area = h * w
    ids = mask.ids()
    windows: list[SliceWindow] = []
    for center in range(1, depth - 1):
        central = lab[center]
        if not central.any():
            continue
        counts = np.bincount(central.ravel())
        for iid in ids:
            n = int(counts[iid]) if iid < len(counts) else 0
            if n < MIN_AREA_FRACTION * area:
                continue
            pixels = np.moveaxis(vox[center - 1 : center + 2], 0, -1)
            labels = np.moveaxis(lab[center - 1 : center + 2] == iid, 0, -1)
            windows.append(
                SliceWindow(
                    pixels=np.ascontiguousarray(pixels, dtype=np.float32),
                    axis=axis,
                    center_index=center,
                    labels=np.ascontiguousarray(labels),
                    indicator=(1, 1, 1),
                    volume_id=volume.id,
                    instance_id=iid,
                )
            )
    return windows


def take_window(volume: Volume, axis: str, center: int) -> np.ndarray:
    """``(H, W, 3)`` pixel stack centered on ``center`` along ``axis``."""
    dim = axis_dim(axis)
    depth = volume.voxels.shape[dim]
    if not 1 <= center <= depth - 2:
        raise InvalidInputError(f"window center {center} outside [1, {depth - 2}]")
    vox = np.moveaxis(volume.voxels, dim, 0)
    return np.ascontiguousarray(np.moveaxis(vox[center - 1 : center + 2], 0, -1), dtype=np.float32)


def resize_window(window: SliceWindow, target: tuple[int, int]) -> SliceWindow:
    """Resample a window to ``target=(H, W)``.

    Pixels use bilinear interpolation, labels nearest neighbour.  Resizing to
    the current shape returns an identical copy.
    """
    th, tw = int(target[0]), int(target[1])
    if th < 16 or tw < 16:
        raise InvalidInputError(f"target size {target} below minimum 16x16")
    if (th, tw) == window.slice_shape:
        return replace(
            window,
            pixels=window.pixels.copy(),
            labels=None if window.labels is None else window.labels.copy(),
        )
    pixels = cv2.resize(window.pixels, (tw, th), interpolation=cv2.INTER_LINEAR)
    # bilinear interpolation cannot leave the convex hull of [0, 255] but
    # guard against tiny float excursions anyway
    pixels = np.clip(pixels, 0.0, 255.0)
    labels = None
    if window.labels is not None:
        labels = (
            cv2.resize(window.labels.astype(np.uint8), (tw, th), interpolation=cv2.INTER_NEAREST)
            .astype(bool)
        )
    return replace(window, pixels=pixels, labels=labels)


# ---------------------------------------------------------------------------
# Run-length encoding


@dataclass
class RleMask:
    """Row-major run-length encoding of one binary slice.

    ``runs`` alternate background/foreground and always start with a
    background run (possibly of length 0); they sum to ``height * width``.
    """

    height: int
    width: int
    runs: list[int]


def rle_encode(mask: np.ndarray) -> RleMask:
    """Encode a 2-D binary mask."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InvalidInputError(f"rle_encode expects a 2-D mask, got shape {m.shape}")
    flat = m.astype(bool).ravel()
    change = np.flatnonzero(np.diff(flat.view(np.int8))) + 1
    starts = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(starts).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return RleMask(int(m.shape[0]), int(m.shape[1]), [int(r) for r in runs])


def rle_decode(rle: RleMask) -> np.ndarray:
    """Decode back to a 2-D boolean mask; raises on inconsistent runs."""
    runs = np.asarray(rle.runs, dtype=np.int64)
    if runs.ndim != 1 or (runs < 0).any():
        raise CorruptDataError("RLE runs must be non-negative integers")
    if runs.sum() != rle.height * rle.width:
        raise CorruptDataError(
            f"RLE runs sum to {int(runs.sum())}, expected {rle.height * rle.width}"
        )
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    return np.repeat(values, runs).reshape(rle.height, rle.width)


# ---------------------------------------------------------------------------
# Disk formats

_VOLUME_FORMAT = "volume-raw-v1"
_MASK_FORMAT = "mask-rle-v1"


def write_json(path: Path | str, obj) -> None:
    """Canonical JSON writer: sorted keys, compact separators, trailing newline.

    Every component that persists JSON goes through this function so that
    equal payloads are byte-identical on disk regardless of who wrote them.
    """
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptDataError(f"{path}: not valid JSON ({exc})") from exc


def save_volume(volume: Volume, directory: Path | str) -> Path:
    """Write ``<id>.vol.raw`` plus sidecar; returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = str(volume.voxels.dtype)
    if name not in DTYPE_CODES:
        raise ConfigError(f"unsupported voxel dtype {name}")
    raw = directory / f"{volume.id}.vol.raw"
    raw.write_bytes(np.ascontiguousarray(volume.voxels, dtype=DTYPE_CODES[name]).tobytes())
    sidecar = directory / f"{volume.id}.vol.json"
    write_json(
        sidecar,
        {
            "format": _VOLUME_FORMAT,
            "id": volume.id,
            "shape": list(volume.voxels.shape),
            "spacing": list(volume.spacing),
            "modality": volume.modality,
            "dtype": name,
        },
    )
    return sidecar


def load_volume(directory: Path | str, volume_id: str | None = None) -> Volume:
    """Load a volume from its sidecar path or from ``directory`` + id."""
    path = Path(directory)
    if volume_id is not None:
        path = path / f"{volume_id}.vol.json"
    if not path.exists():
        raise CorruptDataError(f"missing volume sidecar {path}")
    meta = _read_json(path)
    if meta.get("format") != _VOLUME_FORMAT:
        raise CorruptDataError(f"{path}: unknown volume format {meta.get('format')!r}")
    try:
        shape = tuple(int(v) for v in meta["shape"])
        dtype = DTYPE_CODES[meta["dtype"]]
        spacing = tuple(float(v) for v in meta["spacing"])
        modality = meta["modality"]
        vid = meta["id"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptDataError(f"{path}: bad sidecar field ({exc})") from exc
    raw = path.with_name(f"{vid}.vol.raw")
    if not raw.exists():
        raise CorruptDataError(f"missing voxel file {raw}")
    buf = raw.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(buf) != expected:
        raise CorruptDataError(f"{raw}: size {len(buf)} does not match shape {shape}")
    voxels = np.frombuffer(buf, dtype=dtype).reshape(shape)
    # native byte order copy so downstream torch/numpy ops behave
    voxels = voxels.astype(voxels.dtype.newbyteorder("="), copy=True)
    return Volume(voxels, spacing, modality, vid)


def mask_payload(mask: VolumeMask, volume_id: str) -> dict:
    """JSON-ready payload with one RLE per (instance, nonempty z-slice)."""
    instances = []
    for iid in mask.ids():
        meta = mask.instances.get(iid, {})
        slices = {}
        sub = mask.labels == iid
        for z in range(mask.labels.shape[0]):
            plane = sub[z]
            if plane.any():
                rle = rle_encode(plane)
                slices[str(z)] = {"height": rle.height, "width": rle.width, "runs": rle.runs}
        instances.append(
            {
                "id": iid,
                "name": str(meta.get("name", f"instance-{iid}")),
                "source": str(meta.get("source", "unknown")),
                "slices": slices,
            }
        )
    return {
        "format": _MASK_FORMAT,
        "id": volume_id,
        "shape": list(mask.labels.shape),
        "instances": instances,
    }


def save_mask(mask: VolumeMask, path: Path | str, volume_id: str | None = None) -> Path:
    """Write ``<id>.mask.rle.json``; ``path`` may be a directory or file."""
    path = Path(path)
    if path.suffix != ".json":
        if volume_id is None:
            raise InvalidInputError("volume_id required when saving into a directory")
        path.mkdir(parents=True, exist_ok=True)
        path = path / f"{volume_id}.mask.rle.json"
    elif volume_id is None:
        volume_id = path.name.split(".")[0]
    write_json(path, mask_payload(mask, volume_id))
    return path


def load_mask(path: Path | str) -> VolumeMask:
    path = Path(path)
    if not path.exists():
        raise CorruptDataError(f"missing mask file {path}")
    doc = _read_json(path)
    if doc.get("format") != _MASK_FORMAT:
        raise CorruptDataError(f"{path}: unknown mask format {doc.get('format')!r}")
    try:
        shape = tuple(int(v) for v in doc["shape"])
        raw_instances = doc["instances"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptDataError(f"{path}: bad mask field ({exc})") from exc
    labels = np.zeros(shape, dtype=np.int32)
    instances: dict[int, dict] = {}
    for inst in raw_instances:
        try:
            iid = int(inst["id"])
            slices = inst["slices"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptDataError(f"{path}: bad instance entry ({exc})") from exc
        if iid <= 0:
            raise CorruptDataError(f"{path}: instance ids must be positive, got {iid}")
        instances[iid] = {"name": inst.get("name", ""), "source": inst.get("source", "unknown")}
        for key, entry in slices.items():
            z = int(key)
            if not 0 <= z < shape[0]:
                raise CorruptDataError(f"{path}: slice index {z} outside volume")
            plane = rle_decode(RleMask(int(entry["height"]), int(entry["width"]), entry["runs"]))
            if plane.shape != shape[1:]:
                raise CorruptDataError(f"{path}: slice {z} shape {plane.shape} != {shape[1:]}")
            labels[z][plane] = iid
    return VolumeMask(labels, instances)
