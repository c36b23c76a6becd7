"""Acceptance gate: every core guarantee checked end to end.

Each test covers one headline criterion and emits a single [PASS]/[FAIL]
line (visible with ``pytest -s`` or in the failure report).  The heavier
criteria share one module-scoped training run.
"""

from __future__ import annotations

import time

import numpy as np
import pytest
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from slideseg.bench import (
    cycle_records,
    dice,
    evaluate_volumes,
    iou,
    make_phantom,
    per_slice_image_records,
    prompt_efficiency,
    propagation_image_records,
    zspacing_suite,
)
from slideseg.inference import ModelPredictor, segment_volume
from slideseg.model.encoder import EncoderConfig
from slideseg.model.network import create_model, window_to_tensor
from slideseg.postprocess import (
    NMS_IOU,
    STABILITY_DELTA,
    InstanceMask,
    bbox_iou,
    mask_nms,
    mask_to_bbox,
    morphological_open,
    stability_score,
)
from slideseg.pseudo_labels import (
    ThresholdSliceSegmenter,
    generate_pseudo_records,
    pseudo_training_samples,
)
from slideseg.training import (
    fit,
    hypothesis_losses,
    samples_from_volume,
    select_head,
    simulate_prompt,
)


#: one line per checked guarantee; conftest prints these after the test run
CRITERION_LINES: list[str] = []


def crit(name: str, ok: bool, detail: str = ""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    CRITERION_LINES.append(line)
    print(line)
    assert ok, line


def run_window(model, pixels: np.ndarray, prompt):
    with torch.no_grad():
        masks, ious = model(window_to_tensor(pixels)[None], [prompt])
    return masks[0].numpy(), ious[0].numpy()


# ---------------------------------------------------------------------------
# Loss masking


def test_loss_masking_invariant():
    t0 = time.monotonic()
    rng = np.random.default_rng(7)
    h = w = 9
    logits0 = rng.normal(0.0, 1.5, (h, w, 3, 3))
    ious0 = rng.uniform(0.1, 0.9, 3)
    gt = (rng.random((h, w, 3)) < 0.4).astype(np.float64)

    def selected_loss(logits, indicator, k):
        losses = hypothesis_losses(
            torch.from_numpy(logits), torch.from_numpy(ious0),
            torch.from_numpy(gt), indicator,
        )
        return float(losses[k].detach())

    eps = 1e-5
    worst_masked = 0.0
    indicator = (0, 1, 0)
    k0 = select_head(hypothesis_losses(
        torch.from_numpy(logits0), torch.from_numpy(ious0),
        torch.from_numpy(gt), indicator))
    for s in (0, 2):  # the unsupervised slices
        for j in range(3):
            for y in range(h):
                for x in range(w):
                    up = logits0.copy()
                    dn = logits0.copy()
                    up[y, x, s, j] += eps
                    dn[y, x, s, j] -= eps
                    fd = (selected_loss(up, indicator, k0)
                          - selected_loss(dn, indicator, k0)) / (2 * eps)
                    worst_masked = max(worst_masked, abs(fd))

    indicator = (1, 1, 1)
    k1 = select_head(hypothesis_losses(
        torch.from_numpy(logits0), torch.from_numpy(ious0),
        torch.from_numpy(gt), indicator))
    live = []
    for s in range(3):
        best = 0.0
        for _ in range(30):
            y, x = rng.integers(0, h), rng.integers(0, w)
            up = logits0.copy()
            dn = logits0.copy()
            up[y, x, s, k1] += eps
            dn[y, x, s, k1] -= eps
            fd = (selected_loss(up, indicator, k1)
                  - selected_loss(dn, indicator, k1)) / (2 * eps)
            best = max(best, abs(fd))
            if best > 1e-6:
                break
        live.append(best)

    elapsed = time.monotonic() - t0
    crit(
        "loss masking: unsupervised slices carry zero gradient",
        worst_masked <= 1e-8 and all(v > 1e-6 for v in live) and elapsed < 60,
        f"masked |fd| max {worst_masked:.2e}, live slice |fd| {min(live):.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# Head selection


def test_head_selection_gradients():
    config = EncoderConfig(image_size=32, patch_size=8, embed_dim=32, depth=1,
                           heads=2, lora_rank=2)
    model = create_model(config, seed=3)
    samples = []
    for seed in (4, 5):
        volume, mask = make_phantom("sphere", (32, 48, 48), seed=seed)
        samples.extend(samples_from_volume(volume, mask, 32, seed=seed))
    assert len(samples) >= 20
    rng = np.random.default_rng(11)
    last = model.decoder.iou_head.layers[-1]
    checked = 0
    for sample in samples[:20]:
        prompt = simulate_prompt(sample.window.labels[:, :, 1], rng)
        model.train()
        model.zero_grad(set_to_none=True)
        pixels = window_to_tensor(sample.window.pixels)[None]
        embed = model.encode_image(pixels)
        sparse, dense = model.encode_prompts(prompt)
        masks, ious = model.decode_masks(embed, sparse[None], dense[None])
        gt = torch.from_numpy(sample.window.labels.astype(np.float32))
        losses = hypothesis_losses(masks[0], ious[0], gt, sample.window.indicator)
        k = select_head(losses.detach())
        losses[k].backward()
        for j in range(3):
            hyper = [p.grad for p in model.decoder.hypernets[j].parameters()]
            row_w = last.weight.grad[j] if last.weight.grad is not None else None
            row_b = last.bias.grad[j] if last.bias.grad is not None else None
            if j == k:
                assert any(g is not None and g.abs().sum() > 0 for g in hyper)
            else:
                assert all(g is None or not g.any() for g in hyper)
                assert row_w is None or not row_w.any()
                assert row_b is None or row_b == 0
        checked += 1
    crit("head selection: only the chosen hypothesis receives gradient",
         checked == 20, f"{checked} random samples")


# ---------------------------------------------------------------------------
# Freeze / adapter contract


def test_freeze_and_adapter_contract():
    config = EncoderConfig(image_size=32, patch_size=8, embed_dim=32, depth=1,
                           heads=2, lora_rank=2)
    # fresh adapters are exactly a no-op on the base forward
    model = create_model(config, seed=6)
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.uniform(0, 255, (1, 3, 32, 32)).astype(np.float32))
    with torch.no_grad():
        base = model.encode_image(x)
        ups = [p for n, p in model.named_parameters() if n.endswith(".up")]
        assert all(not p.any() for p in ups)
        for p in ups:
            p.add_(0.05)
        shifted = model.encode_image(x)
        for p in ups:
            p.zero_()
        restored = model.encode_image(x)
    noop_ok = (not torch.equal(base, shifted)) and torch.equal(base, restored)

    volume, mask = make_phantom("sphere", (32, 48, 48), seed=4)
    samples = samples_from_volume(volume, mask, 32, seed=1)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    fit(model, samples, steps=100, batch_size=4, seed=0)
    frozen_ok, adapters_ok, stem_ok = True, True, False
    for name, p in model.named_parameters():
        same = torch.equal(before[name], p)
        if name.endswith(".up") or name.endswith(".down"):
            if name.endswith(".up"):
                adapters_ok = adapters_ok and not same
        elif name.startswith("encoder.blocks") or name == "encoder.pos_embed":
            frozen_ok = frozen_ok and same
        elif "patch_embed" in name:
            stem_ok = stem_ok or not same
    crit(
        "adapter training: backbone frozen, adapters and patch stem move",
        noop_ok and frozen_ok and adapters_ok and stem_ok,
        "100 steps",
    )


# ---------------------------------------------------------------------------
# Branch duplication


def test_duplication_contract():
    config = EncoderConfig(image_size=32, patch_size=8, embed_dim=32, depth=1,
                           heads=2, lora_rank=2)
    target = create_model(config, seed=7)
    reference = create_model(config, seed=7, num_slices=1)
    target.init_from_reference(reference)
    volume, mask = make_phantom("sphere", (32, 48, 48), seed=4)
    sample = samples_from_volume(volume, mask, 32, seed=1)[0]
    prompt = simulate_prompt(sample.window.labels[:, :, 1], np.random.default_rng(0))
    masks3, _ = run_window(target, sample.window.pixels, prompt)
    masks1, _ = run_window(reference, sample.window.pixels, prompt)
    spread = max(
        float(np.abs(masks3[:, :, a, :] - masks3[:, :, b, :]).max())
        for a, b in ((0, 1), (1, 2), (0, 2))
    )
    vs_ref = float(np.abs(masks3[:, :, 1, :] - masks1[:, :, 0, :]).max())
    crit("duplication: branches agree and match the single-slice reference",
         spread <= 1e-6 and vs_ref <= 1e-5,
         f"spread {spread:.2e}, vs reference {vs_ref:.2e}")


# ---------------------------------------------------------------------------
# Gradient correctness


def test_analytic_vs_numeric_gradients():
    config = EncoderConfig(image_size=16, patch_size=8, embed_dim=32, depth=1,
                           heads=2, lora_rank=2)
    model = create_model(config, seed=11).double()
    volume, mask = make_phantom("sphere", (32, 48, 48), seed=4)
    # the equatorial window keeps a nonempty mask at 16x16 resolution
    samples = samples_from_volume(volume, mask, 16, seed=2)
    sample = max(samples, key=lambda s: int(s.window.labels[:, :, 1].sum()))
    prompt = simulate_prompt(sample.window.labels[:, :, 1], np.random.default_rng(3))
    pixels = window_to_tensor(sample.window.pixels).double()[None]
    gt = torch.from_numpy(sample.window.labels.astype(np.float64))
    params = [p for _, p in model.trainable_parameters()]

    def loss_value(k=None):
        embed = model.encode_image(pixels)
        sparse, dense = model.encode_prompts(prompt)
        masks, ious = model.decode_masks(embed, sparse[None], dense[None])
        losses = hypothesis_losses(masks[0], ious[0], gt, sample.window.indicator)
        if k is None:
            return losses
        return losses[k]

    k0 = select_head(loss_value().detach())
    model.zero_grad(set_to_none=True)
    loss_value(k0).backward()
    grad = torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
        for p in params
    ])
    theta0 = parameters_to_vector(params).detach().clone()
    gen = torch.Generator().manual_seed(99)
    eps = 1e-6
    worst = 0.0
    with torch.no_grad():
        for _ in range(10):
            d = torch.randn(theta0.numel(), generator=gen, dtype=torch.float64)
            d /= d.norm()
            vector_to_parameters(theta0 + eps * d, params)
            up = float(loss_value(k0))
            vector_to_parameters(theta0 - eps * d, params)
            dn = float(loss_value(k0))
            vector_to_parameters(theta0, params)
            fd = (up - dn) / (2 * eps)
            an = float(grad @ d)
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-12)
            worst = max(worst, rel)
    crit("gradients: analytic matches finite differences",
         worst <= 1e-3, f"worst relative error {worst:.2e} over 10 directions")


# ---------------------------------------------------------------------------
# Post-processing oracles


def _brute_nms(masks, thresh):
    order = sorted(range(len(masks)), key=lambda i: (-masks[i].score, i))
    kept = []
    for i in order:
        if masks[i].bbox is None:
            kept.append(i)
            continue
        if all(masks[j].bbox is None or bbox_iou(masks[i].bbox, masks[j].bbox) <= thresh
               for j in kept):
            kept.append(i)
    return sorted(kept)


def test_postprocessing_oracles():
    rng = np.random.default_rng(2024)

    nms_ok = 0
    for _ in range(1000):
        n = int(rng.integers(0, 10))
        masks = []
        for _ in range(n):
            pixels = np.zeros((30, 30), dtype=bool)
            if rng.random() > 0.1:  # leave some masks empty
                x0, y0 = rng.integers(0, 18, 2)
                w, h = rng.integers(1, 12, 2)
                pixels[y0:y0 + h, x0:x0 + w] = True
            score = float(rng.choice([0.5, 0.6, 0.7, 0.8]))
            masks.append(InstanceMask(pixels=pixels, score=score, stability=1.0,
                                      bbox=mask_to_bbox(pixels)))
        thresh = float(rng.choice([0.3, 0.5, NMS_IOU, 0.9]))
        got = mask_nms(masks, thresh)
        want = [masks[i] for i in _brute_nms(masks, thresh)]
        assert len(got) == len(want) and all(a is b for a, b in zip(got, want))
        nms_ok += 1

    stab_ok = 0
    for _ in range(1000):
        side = int(rng.integers(3, 10))
        logits = rng.normal(0, 0.3, (side, side)).astype(np.float32)
        hi = np.count_nonzero(logits > STABILITY_DELTA)
        lo = np.count_nonzero(logits > -STABILITY_DELTA)
        want = hi / lo if lo else 0.0
        assert stability_score(logits) == pytest.approx(want)
        stab_ok += 1

    open_ok = 0
    for _ in range(1000):
        m = rng.random((24, 24)) < rng.uniform(0.15, 0.8)
        opened = morphological_open(m)
        assert not (opened & ~m).any()  # anti-extensive
        assert np.array_equal(morphological_open(opened), opened)  # idempotent
        open_ok += 1

    overlap_ok = 0
    for _ in range(1000):
        a = rng.random((8, 8, 8)) < rng.uniform(0.0, 0.9)
        b = rng.random((8, 8, 8)) < rng.uniform(0.0, 0.9)
        inter = int((a & b).sum())
        union = int((a | b).sum())
        pa, pb = int(a.sum()), int(b.sum())
        want_dice = 1.0 if pa + pb == 0 else 2.0 * inter / (pa + pb)
        want_iou = 1.0 if union == 0 else inter / union
        assert dice(a, b) == want_dice and iou(a, b) == want_iou
        overlap_ok += 1

    crit("post-processing: nms/stability/opening/overlap match counting oracles",
         min(nms_ok, stab_ok, open_ok, overlap_ok) == 1000,
         "1000 random cases each")


# ---------------------------------------------------------------------------
# Shared desk-scale training run


KINDS = ("sphere", "ellipsoid")
MODEL_SIZE = 64
TRAIN_STEPS = 300


@pytest.fixture(scope="module")
def trained():
    labeled_samples = []
    for i in range(12):
        volume, mask = make_phantom(KINDS[i % 2], (64, 64, 64), seed=100 + i)
        labeled_samples.extend(samples_from_volume(volume, mask, MODEL_SIZE,
                                                   seed=10 + i))
    assert len(labeled_samples) >= 350

    miner = ThresholdSliceSegmenter()
    volumes, records = {}, []
    for i in range(6):
        volume, _ = make_phantom(KINDS[i % 2], (64, 64, 64), seed=200 + i)
        volumes[volume.id] = volume
        records.extend(generate_pseudo_records(miner, volume, axis="z",
                                               centers=range(1, 63)))
    pseudo_samples = pseudo_training_samples(records, volumes, MODEL_SIZE, seed=77)
    assert len(pseudo_samples) >= 150

    rng = np.random.default_rng(0)
    labeled_set = [labeled_samples[i]
                   for i in rng.permutation(len(labeled_samples))[:350]]
    pseudo_set = [pseudo_samples[i]
                  for i in rng.permutation(len(pseudo_samples))[:150]]
    train_set = labeled_set + pseudo_set

    config = EncoderConfig(image_size=MODEL_SIZE, patch_size=8, embed_dim=96,
                           depth=2, heads=4, lora_rank=4)
    model = create_model(config, seed=0)
    t0 = time.monotonic()
    fit(model, train_set, TRAIN_STEPS, batch_size=8, seed=42)
    train_seconds = time.monotonic() - t0

    model_labeled_only = create_model(config, seed=0)
    fit(model_labeled_only, labeled_set, TRAIN_STEPS, batch_size=8, seed=42)

    held = [make_phantom(KINDS[i % 2], (64, 64, 64), seed=500 + i)
            for i in range(10)]
    results = evaluate_volumes(ModelPredictor(model), held)
    results_labeled_only = evaluate_volumes(ModelPredictor(model_labeled_only), held)
    return {
        "model": model,
        "train_size": (len(labeled_set), len(pseudo_set)),
        "train_seconds": train_seconds,
        "held": held,
        "results": results,
        "results_labeled_only": results_labeled_only,
    }


def test_end_to_end_desk_scale(trained):
    n_labeled, n_pseudo = trained["train_size"]
    results = trained["results"]
    mean_dice = float(np.mean([r.dice for r in results]))
    reasons_ok = all(r.forward_reason == "empty_mask" and
                     r.backward_reason == "empty_mask" for r in results)
    crit(
        "end-to-end: one box prompt segments held-out phantoms",
        n_labeled + n_pseudo == 500 and n_pseudo > 0
        and TRAIN_STEPS <= 2000 and trained["train_seconds"] <= 1800
        and mean_dice >= 0.90 and reasons_ok,
        f"{n_labeled}+{n_pseudo} windows, {TRAIN_STEPS} steps in "
        f"{trained['train_seconds']:.0f}s, mean dice {mean_dice:.4f}, "
        f"terminations {'all empty_mask' if reasons_ok else 'MIXED'}",
    )


def test_batching_invariance(trained):
    volume, mask = trained["held"][0]
    from slideseg.bench import equator_index, tight_box_prompt
    iid = mask.ids()[0]
    start = equator_index(mask.labels, "z", iid)
    prompt = tight_box_prompt(mask.labels, "z", start, iid)
    predictor = ModelPredictor(trained["model"])
    runs = [segment_volume(volume, "z", start, prompt, predictor, max_batch=b)
            for b in (1, 4)]
    same = (np.array_equal(runs[0].mask.labels, runs[1].mask.labels)
            and runs[0].forward_reason == runs[1].forward_reason
            and runs[0].backward_reason == runs[1].backward_reason)
    crit("batching: window batch size never changes the output",
         same, "max_batch 1 vs 4 bit-identical")


def test_zspacing_direction(trained):
    rows = zspacing_suite(ModelPredictor(trained["model"]), trained["held"],
                          ratios=(1.0, 4.0))
    by_ratio = {row["ratio"]: row["dice"] for row in rows}
    crit("z spacing: thicker slices degrade volume dice",
         by_ratio[4.0] < by_ratio[1.0],
         f"dice {by_ratio[1.0]:.4f} @1.0 vs {by_ratio[4.0]:.4f} @4.0")


def test_pseudo_label_direction(trained):
    with_pseudo = float(np.mean([r.dice for r in trained["results"]]))
    without = float(np.mean([r.dice for r in trained["results_labeled_only"]]))
    crit("pseudo labels: mined windows never cost more than 0.02 dice",
         with_pseudo >= without - 0.02,
         f"with {with_pseudo:.4f} vs labeled-only {without:.4f}")


def test_prompt_efficiency(trained):
    budget = 1000
    prop = cycle_records(propagation_image_records(trained["results"]), budget)
    base = cycle_records(
        per_slice_image_records(ModelPredictor(trained["model"]), trained["held"]),
        budget,
    )
    n_prop = prompt_efficiency(prop, budget=budget)
    n_base = prompt_efficiency(base, budget=budget)
    crit("prompt efficiency: propagation annotates 3x more slices per budget",
         n_base > 0 and n_prop >= 3 * n_base,
         f"{n_prop} vs {n_base} slices per {budget} prompts "
         f"({n_prop / max(n_base, 1):.1f}x)")
