"""Pseudo-label mining from unlabeled volumes.

Four intensity truncations around the volume mean pull different structures
out of the raw histogram; superpixels on each rendering propose point and box
prompts; a promptable segmenter turns the prompts into candidate masks, which
are quality-filtered and deduplicated.  Survivors become 2-D training records
whose indicator marks only the central slice as supervised.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.segmentation import slic

from .errors import CorruptDataError, DegenerateVolumeError, InvalidInputError
from .postprocess import (
    DecoderOutputs,
    filter_predictions,
    mask_nms,
    mask_to_bbox,
)
from .prompts import Prompt
from .training import TrainingSample
from .volume_io import (
    RleMask,
    SliceWindow,
    Volume,
    axis_dim,
    resize_window,
    rle_decode,
    rle_encode,
    take_window,
)

TRUNCATION_KS = (3.0, 2.0, 1.0, 0.5)
SLIC_COMPACTNESS = 10.0
DEFAULT_SEGMENTS = 64
MEAN_MIN = 20.0


@dataclass
class TruncationVariant:
    """One truncated rendering of a volume, normalized to [0, 255]."""

    k: float
    lo: float
    hi: float
    voxels: np.ndarray  # float32, same shape as the source volume


def truncation_variants(volume: Volume, ks=TRUNCATION_KS) -> list[TruncationVariant]:
    """Clamp raw intensities to ``[mu - k*sigma, mu + k*sigma]`` per k.

    Each clamp range maps affinely onto ``[0, 255]`` with round-half-away,
    so small k exaggerates contrast near the mean while large k approaches
    the plain normalization.  Constant volumes have no spread to truncate
    and raise ``DegenerateVolumeError``.
    """
    vox = volume.voxels.astype(np.float64)
    mu = float(vox.mean())
    sigma = float(vox.std())
    if sigma == 0.0:
        raise DegenerateVolumeError(f"{volume.id}: constant intensity, nothing to truncate")
    centered = vox - mu
    variants = []
    for k in ks:
        half = k * sigma
        clipped = np.clip(centered, -half, half)
        rendered = np.floor((clipped + half) / (2.0 * half) * 255.0 + 0.5)
        variants.append(TruncationVariant(float(k), mu - half, mu + half,
                                          rendered.astype(np.float32)))
    return variants


@dataclass
class SuperpixelPrompt:
    """Centroid click and tight box for one bright-enough superpixel."""

    point: tuple[float, float]  # (x, y)
    box: tuple[int, int, int, int]
    label: int
    mean_intensity: float


def superpixel_prompts(image: np.ndarray, n_segments: int = DEFAULT_SEGMENTS,
                       mean_min: float = MEAN_MIN) -> list[SuperpixelPrompt]:
    """Propose prompts from a SLIC over-segmentation of one rendered slice.

    Superpixels whose mean intensity falls below ``mean_min`` (near-black
    background) are dropped.  At most one prompt record per superpixel comes
    back, carrying both its centroid point and its bounding box.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise InvalidInputError(f"superpixel_prompts expects a 2-D image, got {img.shape}")
    if n_segments < 1:
        raise InvalidInputError("n_segments must be >= 1")
    segments = slic(img / 255.0, n_segments=n_segments, compactness=SLIC_COMPACTNESS,
                    start_label=0, channel_axis=None)
    prompts = []
    for label in np.unique(segments):
        region = segments == label
        mean_val = float(img[region].mean())
        if mean_val < mean_min:
            continue
        ys, xs = np.nonzero(region)
        centroid = (float(xs.mean()), float(ys.mean()))
        box = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
        prompts.append(SuperpixelPrompt(point=centroid, box=box, label=int(label),
                                        mean_intensity=mean_val))
    return prompts


class ThresholdSliceSegmenter:
    """Classical single-slice segmenter: Otsu threshold + connected components.

    Good enough to mine pseudo-labels from high-contrast volumes without a
    trained model; any promptable segmenter with the same ``segment`` shape
    can stand in for it.  Confidence is honest: the predicted IoU is the
    selected component's share of the (opened) threshold mask, so fragmented
    noise splits report low quality and get dropped by the standard filter.
    """

    logit_scale = 6.0

    def segment(self, image: np.ndarray, prompt: Prompt) -> DecoderOutputs:
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape
        prompt.validate_bounds(h, w)
        if img.max() > img.min():
            thr = threshold_otsu(img)
        else:
            thr = img.max() + 1.0  # constant slice: nothing is foreground
        binary = ndimage.binary_opening(img > thr, structure=np.ones((3, 3), dtype=bool))
        labeled, count = ndimage.label(binary, structure=np.ones((3, 3), dtype=bool))
        target = np.zeros((h, w), dtype=bool)
        if count:
            if prompt.points is not None:
                x, y = (int(round(v)) for v in prompt.points[0])
                if labeled[y, x] > 0:
                    target = labeled == labeled[y, x]
            elif prompt.box is not None:
                x0, y0, x1, y1 = (int(round(v)) for v in prompt.box)
                cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
                if labeled[cy, cx] > 0:
                    target = labeled == labeled[cy, cx]
                else:
                    inside = np.bincount(
                        labeled[y0 : y1 + 1, x0 : x1 + 1].ravel(), minlength=count + 1
                    )
                    inside[0] = 0
                    if inside.max() > 0:
                        target = labeled == int(np.argmax(inside))
        confidence = float(target.sum()) / max(float(binary.sum()), 1.0)
        logits = np.where(target, self.logit_scale, -self.logit_scale).astype(np.float32)
        empty = np.full((h, w), -self.logit_scale, dtype=np.float32)
        masks = np.stack([logits, empty, empty], axis=-1)[:, :, None, :]  # (H, W, 1, 3)
        return DecoderOutputs(masks=masks, iou=np.array([confidence, 0.0, 0.0], dtype=np.float32))


class ModelSliceSegmenter:
    """Single-slice adapter over a 3-slice model: replicate, predict, take middle."""

    def __init__(self, predictor):
        self.predictor = predictor

    def segment(self, image: np.ndarray, prompt: Prompt) -> DecoderOutputs:
        img = np.asarray(image, dtype=np.float32)
        window = np.repeat(img[:, :, None], 3, axis=2)
        outputs = self.predictor.predict([window], [prompt])[0]
        central = outputs.masks[:, :, 1:2, :]
        return DecoderOutputs(masks=central, iou=outputs.iou)


@dataclass
class PseudoRecord:
    """One mined 2-D label: a mask on the central slice of a window."""

    volume_id: str
    axis: str
    center: int
    mask: np.ndarray  # (H, W) bool
    variant_k: float
    prompt_type: str
    score: float

    INDICATOR = (0, 1, 0)


def generate_pseudo_records(segmenter, volume: Volume, *, axis: str = "z",
                            centers=None, n_segments: int = DEFAULT_SEGMENTS,
                            mean_min: float = MEAN_MIN, nms_thresh: float = 0.7,
                            iou_min: float = 0.4, stab_min: float = 0.6,
                            min_area: int = 16) -> list[PseudoRecord]:
    """Mine central-slice masks from every truncation variant of a volume.

    For each candidate center, prompts proposed on each variant's rendering
    are segmented (point and box separately), quality-filtered, pooled across
    variants and deduplicated with box NMS.
    """
    dim = axis_dim(axis)
    depth = volume.voxels.shape[dim]
    if centers is None:
        centers = range(1, depth - 1, 4)
    variants = truncation_variants(volume)
    records: list[PseudoRecord] = []
    for center in centers:
        if not 1 <= center <= depth - 2:
            raise InvalidInputError(f"center {center} outside interior of axis {axis}")
        pool = []
        meta = []
        for variant in variants:
            rendered = np.moveaxis(variant.voxels, dim, 0)[center]
            for sp in superpixel_prompts(rendered, n_segments=n_segments, mean_min=mean_min):
                for kind, prompt in (
                    ("point", Prompt(points=np.array([sp.point]), point_labels=np.array([1]))),
                    ("box", Prompt(box=sp.box)),
                ):
                    outputs = segmenter.segment(rendered, prompt)
                    for survivor in filter_predictions(outputs, iou_min=iou_min,
                                                       stab_min=stab_min):
                        if int(survivor.pixels.sum()) < min_area:
                            continue
                        pool.append(survivor)
                        meta.append((variant.k, kind))
        kept = mask_nms(pool, iou_thresh=nms_thresh)
        kept_ids = {id(m) for m in kept}
        for survivor, (k, kind) in zip(pool, meta):
            if id(survivor) not in kept_ids:
                continue
            records.append(PseudoRecord(
                volume_id=volume.id, axis=axis, center=int(center),
                mask=survivor.pixels.astype(bool), variant_k=float(k),
                prompt_type=kind, score=float(survivor.score),
            ))
    return records


def save_pseudo_records(records: list[PseudoRecord], path: Path | str) -> Path:
    """One JSONL line per record; masks stored as run-length encodings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            rle = rle_encode(rec.mask)
            fh.write(json.dumps({
                "volume": rec.volume_id,
                "axis": rec.axis,
                "center": rec.center,
                "indicator": list(PseudoRecord.INDICATOR),
                "gt_rle": {"height": rle.height, "width": rle.width, "runs": rle.runs},
                "provenance": {
                    "variant_k": rec.variant_k,
                    "prompt": rec.prompt_type,
                    "score": rec.score,
                },
            }, sort_keys=True) + "\n")
    return path


def load_pseudo_records(path: Path | str) -> list[PseudoRecord]:
    path = Path(path)
    if not path.exists():
        raise CorruptDataError(f"missing pseudo-label file {path}")
    records = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            rle = doc["gt_rle"]
            mask = rle_decode(RleMask(int(rle["height"]), int(rle["width"]), rle["runs"]))
            prov = doc.get("provenance", {})
            records.append(PseudoRecord(
                volume_id=str(doc["volume"]), axis=str(doc["axis"]),
                center=int(doc["center"]), mask=mask,
                variant_k=float(prov.get("variant_k", 0.0)),
                prompt_type=str(prov.get("prompt", "box")),
                score=float(prov.get("score", 0.0)),
            ))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise CorruptDataError(f"{path}:{line_no}: bad pseudo record ({exc})") from exc
    return records


def pseudo_training_samples(records: list[PseudoRecord], volumes: dict[str, Volume],
                            model_size: int, seed: int = 0) -> list[TrainingSample]:
    """Materialize pseudo records as resized, centrally supervised samples."""
    rng = np.random.default_rng(seed)
    samples = []
    for rec in records:
        volume = volumes.get(rec.volume_id)
        if volume is None:
            raise InvalidInputError(f"pseudo record references unknown volume {rec.volume_id}")
        pixels = take_window(volume, rec.axis, rec.center)
        labels = np.zeros(pixels.shape, dtype=bool)
        labels[:, :, 1] = rec.mask
        window = SliceWindow(
            pixels=pixels, axis=rec.axis, center_index=rec.center, labels=labels,
            indicator=PseudoRecord.INDICATOR, volume_id=rec.volume_id,
        )
        resized = resize_window(window, (model_size, model_size))
        # drop records whose mask vanished under resampling
        if not resized.labels[:, :, 1].any():
            continue
        samples.append(TrainingSample(resized, prompt_seed=int(rng.integers(2**31))))
    return samples
