"""Truncation renderings, superpixel prompting and pseudo-label mining."""

from __future__ import annotations

import numpy as np
import pytest

from slideseg.bench import dice
from slideseg.errors import CorruptDataError, DegenerateVolumeError, InvalidInputError
from slideseg.postprocess import filter_predictions
from slideseg.prompts import Prompt
from slideseg.pseudo_labels import (
    TRUNCATION_KS,
    ModelSliceSegmenter,
    PseudoRecord,
    ThresholdSliceSegmenter,
    generate_pseudo_records,
    load_pseudo_records,
    pseudo_training_samples,
    save_pseudo_records,
    superpixel_prompts,
    truncation_variants,
)
from slideseg.volume_io import Volume


# ---------------------------------------------------------------------------
# Truncated renderings


def oracle_rendering(vox, k):
    vox = vox.astype(np.float64)
    mu, sigma = vox.mean(), vox.std()
    half = k * sigma
    clipped = np.clip(vox - mu, -half, half)
    return np.floor((clipped + half) / (2.0 * half) * 255.0 + 0.5).astype(np.float32)


def test_truncation_variants_match_oracle():
    rng = np.random.default_rng(0)
    vox = rng.normal(100.0, 30.0, (4, 12, 12)).astype(np.float32)
    volume = Volume(vox, id="t")
    variants = truncation_variants(volume)
    assert [v.k for v in variants] == list(TRUNCATION_KS)
    mu, sigma = float(vox.astype(np.float64).mean()), float(vox.astype(np.float64).std())
    for v in variants:
        assert v.lo == pytest.approx(mu - v.k * sigma)
        assert v.hi == pytest.approx(mu + v.k * sigma)
        assert np.array_equal(v.voxels, oracle_rendering(vox, v.k))
        assert v.voxels.min() >= 0.0 and v.voxels.max() <= 255.0
        assert np.array_equal(v.voxels, np.floor(v.voxels))  # integral levels


def test_truncation_small_k_saturates_more():
    rng = np.random.default_rng(1)
    vox = rng.normal(0.0, 50.0, (4, 16, 16)).astype(np.float32)
    variants = {v.k: v.voxels for v in truncation_variants(Volume(vox, id="t"))}
    # k=0.5 clamps at half a sigma, so far more voxels sit at the two ends
    ends_tight = np.mean((variants[0.5] == 0) | (variants[0.5] == 255))
    ends_wide = np.mean((variants[3.0] == 0) | (variants[3.0] == 255))
    assert ends_tight > ends_wide + 0.3


def test_truncation_constant_volume_raises():
    vox = np.full((4, 8, 8), 7.0, np.float32)
    with pytest.raises(DegenerateVolumeError):
        truncation_variants(Volume(vox, id="flat"))


def test_truncation_shift_invariance_bit_exact():
    # Integer intensities and a power-of-two voxel count make the mean and the
    # centered deviations exactly representable, so adding a constant shifts
    # nothing in the rendering — not even the last bit.
    rng = np.random.default_rng(2)
    vox = rng.integers(0, 200, (4, 16, 16)).astype(np.float32)
    assert vox.size == 1024
    base = truncation_variants(Volume(vox, id="a"))
    shifted = truncation_variants(Volume(vox + 512.0, id="b"))
    for va, vb in zip(base, shifted):
        assert va.k == vb.k
        assert np.array_equal(va.voxels, vb.voxels)
        assert vb.lo == pytest.approx(va.lo + 512.0)


# ---------------------------------------------------------------------------
# Superpixel prompt proposals


def bright_blob_image(h=64, w=64, cy=30, cx=34, r=10):
    img = np.zeros((h, w), np.float32)
    yy, xx = np.mgrid[:h, :w]
    img[((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r] = 220.0
    return img


def test_superpixel_prompts_on_blob():
    img = bright_blob_image()
    prompts = superpixel_prompts(img, n_segments=32)
    assert prompts
    labels = set()
    hit_blob = False
    for sp in prompts:
        x, y = sp.point
        x0, y0, x1, y1 = sp.box
        assert x0 <= x <= x1 and y0 <= y <= y1  # centroid inside its own box
        assert sp.mean_intensity >= 20.0
        assert sp.label not in labels
        labels.add(sp.label)
        if img[int(round(y)), int(round(x))] > 0:
            hit_blob = True
    assert hit_blob


def test_superpixel_prompts_all_dark_image_yields_nothing():
    assert superpixel_prompts(np.zeros((32, 32), np.float32), n_segments=16) == []


def test_superpixel_prompts_validation():
    with pytest.raises(InvalidInputError):
        superpixel_prompts(np.zeros((4, 4, 3), np.float32))
    with pytest.raises(InvalidInputError):
        superpixel_prompts(np.zeros((8, 8), np.float32), n_segments=0)


# ---------------------------------------------------------------------------
# Classical slice segmenter with honest confidence


def two_disc_image(h=64, w=64):
    img = np.zeros((h, w), np.float32)
    yy, xx = np.mgrid[:h, :w]
    big = ((yy - 20) ** 2 + (xx - 20) ** 2) <= 100  # r=10
    small = ((yy - 48) ** 2 + (xx - 48) ** 2) <= 25  # r=5
    img[big | small] = 200.0
    return img, big, small


def test_threshold_segmenter_single_component_is_fully_confident():
    img, big, small = two_disc_image()
    img[small] = 0.0  # only the big disc remains
    seg = ThresholdSliceSegmenter()
    out = seg.segment(img, Prompt(points=np.array([[20.0, 20.0]]),
                                  point_labels=np.array([1])))
    assert out.masks.shape == (64, 64, 1, 3)
    assert out.iou[0] == pytest.approx(1.0)
    (best,) = filter_predictions(out)
    assert best.pixels.ndim == 2
    assert dice(best.pixels, big) > 0.95  # opening may shave boundary pixels


def test_threshold_segmenter_confidence_is_component_share():
    img, big, small = two_disc_image()
    seg = ThresholdSliceSegmenter()
    out = seg.segment(img, Prompt(points=np.array([[20.0, 20.0]]),
                                  point_labels=np.array([1])))
    # confidence = |selected component| / |all threshold foreground|
    from scipy import ndimage
    from skimage.filters import threshold_otsu

    binary = ndimage.binary_opening(img > threshold_otsu(img),
                                    structure=np.ones((3, 3), bool))
    labeled, _ = ndimage.label(binary, structure=np.ones((3, 3), bool))
    component = labeled == labeled[20, 20]
    want = component.sum() / binary.sum()
    assert out.iou[0] == pytest.approx(want, abs=1e-6)
    assert 0.5 < out.iou[0] < 1.0  # the small disc eats into the share


def test_threshold_segmenter_box_prompt_picks_majority_component():
    img, big, small = two_disc_image()
    seg = ThresholdSliceSegmenter()
    out = seg.segment(img, Prompt(box=(10.0, 10.0, 30.0, 30.0)))
    (best,) = filter_predictions(out)
    assert dice(best.pixels, big) > 0.95
    assert not (best.pixels & small).any()


def test_threshold_segmenter_background_point_gets_filtered():
    img, _, _ = two_disc_image()
    seg = ThresholdSliceSegmenter()
    out = seg.segment(img, Prompt(points=np.array([[2.0, 2.0]]),
                                  point_labels=np.array([1])))
    assert out.iou[0] == 0.0
    assert filter_predictions(out) == []


def test_threshold_segmenter_constant_slice_has_no_foreground():
    seg = ThresholdSliceSegmenter()
    out = seg.segment(np.full((32, 32), 9.0, np.float32),
                      Prompt(points=np.array([[5.0, 5.0]]), point_labels=np.array([1])))
    assert out.iou[0] == 0.0
    assert not (out.masks[:, :, 0, 0] > 0).any()


def test_model_slice_segmenter_replicates_and_takes_middle():
    calls = {}

    class Stub:
        def predict(self, windows, prompts):
            calls["window"] = windows[0]
            h, w = windows[0].shape[:2]
            masks = np.zeros((h, w, 3, 3), np.float32)
            masks[:, :, 1, 0] = 5.0  # only the middle slice is positive
            from slideseg.postprocess import DecoderOutputs

            return [DecoderOutputs(masks=masks, iou=np.array([0.9, 0.1, 0.1]))]

    img = np.full((16, 16), 40.0, np.float32)
    out = ModelSliceSegmenter(Stub()).segment(
        img, Prompt(points=np.array([[4.0, 4.0]]), point_labels=np.array([1]))
    )
    assert calls["window"].shape == (16, 16, 3)
    assert np.array_equal(calls["window"][:, :, 0], img)
    assert np.array_equal(calls["window"][:, :, 2], img)
    assert out.masks.shape == (16, 16, 1, 3)
    assert (out.masks[:, :, 0, 0] > 0).all()


# ---------------------------------------------------------------------------
# End-to-end mining on a synthetic volume


def test_generate_pseudo_records_purity(sphere_case):
    volume, mask = sphere_case
    seg = ThresholdSliceSegmenter()
    depth = volume.voxels.shape[0]
    centers = list(range(depth // 2 - 4, depth // 2 + 5, 4))
    records = generate_pseudo_records(seg, volume, centers=centers)
    assert records
    for rec in records:
        assert rec.volume_id == volume.id
        assert rec.axis == "z"
        assert rec.center in centers
        assert rec.mask.dtype == bool and rec.mask.shape == volume.voxels.shape[1:]
        assert rec.mask.sum() >= 16
        assert 0.0 < rec.score <= 1.0
        assert rec.variant_k in TRUNCATION_KS
        assert rec.prompt_type in ("point", "box")
        gt_plane = mask.labels[rec.center] > 0
        assert dice(rec.mask, gt_plane) >= 0.9
    assert PseudoRecord.INDICATOR == (0, 1, 0)


def test_generate_pseudo_records_bad_center(sphere_case):
    volume, _ = sphere_case
    with pytest.raises(InvalidInputError):
        generate_pseudo_records(ThresholdSliceSegmenter(), volume, centers=[0])


def test_pseudo_record_roundtrip(tmp_path, sphere_case):
    volume, _ = sphere_case
    records = generate_pseudo_records(
        ThresholdSliceSegmenter(), volume, centers=[volume.voxels.shape[0] // 2]
    )
    assert records
    path = save_pseudo_records(records, tmp_path / "mined.jsonl")
    back = load_pseudo_records(path)
    assert len(back) == len(records)
    for a, b in zip(records, back):
        assert np.array_equal(a.mask, b.mask)
        assert (a.volume_id, a.axis, a.center) == (b.volume_id, b.axis, b.center)
        assert a.variant_k == b.variant_k and a.prompt_type == b.prompt_type
        assert a.score == pytest.approx(b.score)


def test_load_pseudo_records_errors(tmp_path):
    with pytest.raises(CorruptDataError):
        load_pseudo_records(tmp_path / "nope.jsonl")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"volume": "v", "axis": "z"}\n')  # missing fields
    with pytest.raises(CorruptDataError, match=":1:"):
        load_pseudo_records(bad)
    garbled = tmp_path / "garbled.jsonl"
    garbled.write_text("not json at all\n")
    with pytest.raises(CorruptDataError):
        load_pseudo_records(garbled)


def test_pseudo_training_samples(sphere_case, tiny_config):
    volume, _ = sphere_case
    records = generate_pseudo_records(
        ThresholdSliceSegmenter(), volume, centers=[volume.voxels.shape[0] // 2]
    )
    size = tiny_config.image_size
    samples = pseudo_training_samples(records, {volume.id: volume}, size, seed=4)
    assert samples
    for s in samples:
        assert s.window.indicator == (0, 1, 0)
        assert s.window.pixels.shape == (size, size, 3)
        assert s.window.labels[:, :, 1].any()
        assert not s.window.labels[:, :, 0].any()
        assert not s.window.labels[:, :, 2].any()
    again = pseudo_training_samples(records, {volume.id: volume}, size, seed=4)
    assert [s.prompt_seed for s in samples] == [s.prompt_seed for s in again]
    with pytest.raises(InvalidInputError):
        pseudo_training_samples(records, {}, size)
