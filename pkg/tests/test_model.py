"""Network architecture: adapters, freeze partition, branch duplication."""

from __future__ import annotations

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from slideseg.errors import ConfigError, CorruptDataError, InvalidPromptError
from slideseg.model import (
    EncoderConfig,
    LoraLinear,
    create_model,
    load_checkpoint,
    lora_forward,
    save_checkpoint,
)
from slideseg.model.decoder import NUM_HYPOTHESES
from slideseg.model.network import window_to_tensor
from slideseg.prompts import Prompt


def run_window(model, pixels, prompt):
    """One window through the full model; numpy (H, W, S, J) masks + (J,) ious."""
    with torch.no_grad():
        masks, ious = model(window_to_tensor(pixels)[None], [prompt])
    return masks[0].numpy(), ious[0].numpy()


# ---------------------------------------------------------------------------
# Low-rank adapters


def test_lora_forward_hand_example():
    # W = I2, down = [[1, 1]], up = [[2], [1]]: y = x + scale * up @ (down @ x)
    W = torch.eye(2, dtype=torch.float64)
    down = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
    up = torch.tensor([[2.0], [1.0]], dtype=torch.float64)
    x = torch.tensor([[2.0, 3.0]], dtype=torch.float64)
    # down @ x = 5; up gives (10, 5); plus Wx = (2, 3) -> (12, 8); scale 0.5 -> (7, 5.5)
    y = lora_forward(W, down, up, x, scale=1.0)
    assert torch.allclose(y, torch.tensor([[12.0, 8.0]], dtype=torch.float64))
    y_half = lora_forward(W, down, up, x, scale=0.5)
    assert torch.allclose(y_half, torch.tensor([[7.0, 5.5]], dtype=torch.float64))


def test_lora_forward_shape_checks():
    W = torch.eye(4)
    with pytest.raises(ConfigError):
        lora_forward(W, torch.zeros(2, 3), torch.zeros(4, 2), torch.zeros(1, 4))


def test_lora_linear_zero_init_is_identity():
    torch.manual_seed(0)
    base = torch.nn.Linear(16, 16)
    wrapped = LoraLinear(base, rank=4, alpha=4.0)
    x = torch.randn(5, 16)
    assert torch.equal(wrapped(x), F.linear(x, base.weight, base.bias))
    # once the up matrix moves away from zero the adapter contributes
    with torch.no_grad():
        wrapped.up.add_(0.1)
    assert not torch.equal(wrapped(x), F.linear(x, base.weight, base.bias))


def test_lora_linear_base_frozen():
    base = torch.nn.Linear(8, 8)
    wrapped = LoraLinear(base, rank=2, alpha=2.0)
    trainable = {n for n, p in wrapped.named_parameters() if p.requires_grad}
    assert trainable == {"down", "up"}


def test_lora_scale_is_alpha_over_rank():
    base = torch.nn.Linear(8, 8)
    assert LoraLinear(base, rank=2, alpha=4.0).scale == pytest.approx(2.0)
    assert LoraLinear(base, rank=4, alpha=1.0).scale == pytest.approx(0.25)


# ---------------------------------------------------------------------------
# Configuration


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(image_size=100, patch_size=8)
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=50, heads=4)  # not divisible by heads
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=36, heads=4)  # not divisible by 8


def test_config_roundtrip():
    cfg = EncoderConfig(image_size=64, patch_size=8, embed_dim=32, depth=2, heads=2)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# Forward contract


def windows_batch(cfg, n=1, seed=0):
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    return [rng.uniform(0, 255, (size, size, 3)).astype(np.float32) for _ in range(n)]


def test_forward_shapes(tiny_model, tiny_config):
    size = tiny_config.image_size
    (pixels,) = windows_batch(tiny_config)
    prompt = Prompt(points=np.array([[10.0, 12.0]]))
    masks, ious = run_window(tiny_model, pixels, prompt)
    assert masks.shape == (size, size, 3, NUM_HYPOTHESES)
    assert ious.shape == (NUM_HYPOTHESES,)
    assert np.all((ious >= 0) & (ious <= 1))  # sigmoid head


def test_forward_deterministic(tiny_config):
    m1 = create_model(tiny_config, seed=3)
    m2 = create_model(tiny_config, seed=3)
    s1, s2 = m1.state_dict(), m2.state_dict()
    assert s1.keys() == s2.keys()
    for k in s1:
        assert torch.equal(s1[k], s2[k]), k
    (pixels,) = windows_batch(tiny_config)
    prompt = Prompt(box=(4.0, 4.0, 20.0, 24.0))
    a, ua = run_window(m1, pixels, prompt)
    b, ub = run_window(m2, pixels, prompt)
    assert np.array_equal(a, b) and np.array_equal(ua, ub)


def test_different_seeds_differ(tiny_config):
    m1 = create_model(tiny_config, seed=0)
    m2 = create_model(tiny_config, seed=1)
    diff = any(
        not torch.equal(p1, p2)
        for (n1, p1), (n2, p2) in zip(m1.state_dict().items(), m2.state_dict().items())
    )
    assert diff


def test_encoder_batching_bit_invariant(tiny_config):
    model = create_model(tiny_config, seed=0)
    xs = windows_batch(tiny_config, n=3, seed=5)
    stack = torch.stack([torch.from_numpy(x).permute(2, 0, 1) for x in xs])
    with torch.no_grad():
        batched = model.encode_image(stack)
        singles = [model.encode_image(stack[i : i + 1]) for i in range(3)]
    for i in range(3):
        assert torch.equal(batched[i : i + 1], singles[i])


def test_prompt_token_counts(tiny_model, tiny_config):
    enc = tiny_model.prompt_encoder
    sparse, dense = enc.encode(Prompt(points=np.array([[4.0, 4.0]])))
    assert sparse.shape[0] == 1
    sparse, _ = enc.encode(Prompt(box=(1.0, 1.0, 10.0, 10.0)))
    assert sparse.shape[0] == 2  # two corner tokens
    sparse, _ = enc.encode(
        Prompt(points=np.array([[4.0, 4.0], [8.0, 8.0]]), box=(1.0, 1.0, 10.0, 10.0))
    )
    assert sparse.shape[0] == 4
    g = tiny_config.grid_size
    assert dense.shape[-2:] == (g, g)


def test_prompt_mask_changes_dense(tiny_model, tiny_config):
    enc = tiny_model.prompt_encoder
    size = tiny_config.image_size
    _, dense_plain = enc.encode(Prompt(points=np.array([[4.0, 4.0]])))
    m = np.zeros((size, size, 3), np.float32)
    m[8:16, 8:16, 1] = 6.0
    _, dense_masked = enc.encode(Prompt(points=np.array([[4.0, 4.0]]), mask=m))
    assert not torch.equal(dense_plain, dense_masked)


def test_prompt_out_of_bounds(tiny_model, tiny_config):
    size = tiny_config.image_size
    (pixels,) = windows_batch(tiny_config)
    with pytest.raises(InvalidPromptError):
        run_window(tiny_model, pixels, Prompt(points=np.array([[size + 5.0, 2.0]])))


# ---------------------------------------------------------------------------
# Freeze partition


def frozen_and_trainable(model):
    frozen, trainable = set(), set()
    for name, p in model.named_parameters():
        (trainable if p.requires_grad else frozen).add(name)
    return frozen, trainable


def test_freeze_partition_rules(tiny_model):
    frozen, trainable = frozen_and_trainable(tiny_model)
    assert frozen and trainable
    for name in frozen:
        assert name.startswith("encoder.")
        assert ".down" not in name and ".up" not in name
        assert not name.startswith("encoder.patch_embed")
    for name in trainable:
        if name.startswith("encoder."):
            assert (
                name.startswith("encoder.patch_embed")
                or ".down" in name
                or ".up" in name
            ), name
    # the positional table and every transformer block weight are frozen
    assert "encoder.pos_embed" in frozen
    assert any(n.startswith("encoder.blocks.0") for n in frozen)
    # adapters exist on both q and v projections of every block
    depth = sum(1 for n in trainable if n.endswith("attn.q.down"))
    assert depth == tiny_model.config.depth
    assert sum(1 for n in trainable if n.endswith("attn.v.down")) == depth


def test_adapters_start_as_noop(tiny_config):
    model = create_model(tiny_config, seed=2)
    (pixels,) = windows_batch(tiny_config, seed=1)
    x = torch.from_numpy(pixels).permute(2, 0, 1)[None]
    with torch.no_grad():
        before = model.encode_image(x)
        for name, p in model.named_parameters():
            if name.endswith(".up"):
                p.add_(0.05)
        after = model.encode_image(x)
    assert not torch.equal(before, after)
    # zeroing the up matrices restores the exact base forward
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".up"):
                p.zero_()
        restored = model.encode_image(x)
    assert torch.equal(before, restored)


# ---------------------------------------------------------------------------
# Branch duplication contract


def test_reference_duplication_outputs_match(tiny_config):
    # Same seed: encoder and prompt encoder are built before the decoder, so
    # the 1-slice reference and the 3-slice target share them bit-for-bit.
    target = create_model(tiny_config, seed=7)
    reference = create_model(tiny_config, seed=7, num_slices=1)
    for (ka, va), (kb, vb) in zip(
        target.encoder.state_dict().items(), reference.encoder.state_dict().items()
    ):
        assert ka == kb and torch.equal(va, vb)
    target.init_from_reference(reference)

    (pixels,) = windows_batch(tiny_config, seed=3)
    prompt = Prompt(points=np.array([[10.0, 10.0]]))
    masks, ious = run_window(target, pixels, prompt)
    ref_masks, ref_ious = run_window(reference, pixels, prompt)
    assert ref_masks.shape[2] == 1
    # all three slice branches start identical
    for s in (1, 2):
        assert np.allclose(masks[:, :, 0, :], masks[:, :, s, :], atol=1e-6)
    # and each reproduces the single-slice reference output
    for s in range(3):
        assert np.allclose(masks[:, :, s, :], ref_masks[:, :, 0, :], atol=1e-5)
    assert np.allclose(ious, ref_ious, atol=1e-6)


def test_reference_duplication_copies_non_branch_weights(tiny_config):
    target = create_model(tiny_config, seed=7)
    src = create_model(tiny_config, seed=8, num_slices=1)
    reference = {k: v.clone() for k, v in src.decoder.state_dict().items()}
    target.init_from_reference(reference)
    for key, value in target.decoder.state_dict().items():
        if key.startswith("branches."):
            want = reference["branches.0." + key.split(".", 2)[2]]
        else:
            want = reference[key]
        assert torch.equal(value, want), key
    # adopting decoder weights leaves the image encoder untouched
    fresh = create_model(tiny_config, seed=7)
    for (ka, va), (kb, vb) in zip(
        target.encoder.state_dict().items(), fresh.encoder.state_dict().items()
    ):
        assert ka == kb and torch.equal(va, vb)


def test_reference_duplication_validates(tiny_config, tiny_model):
    src = create_model(tiny_config, seed=8, num_slices=1)
    good = dict(src.decoder.state_dict())
    incomplete = dict(good)
    incomplete.pop(sorted(incomplete)[0])
    with pytest.raises(ConfigError):
        tiny_model.init_from_reference(incomplete)
    second_branch = dict(good)
    second_branch["branches.1.net.0.weight"] = torch.zeros(1)
    with pytest.raises(ConfigError):
        tiny_model.init_from_reference(second_branch)
    extra = dict(good)
    extra["mystery.weight"] = torch.zeros(1)
    with pytest.raises(ConfigError):
        tiny_model.init_from_reference(extra)
    wrong_shape = dict(good)
    key = next(k for k in wrong_shape if k.endswith("weight"))
    wrong_shape[key] = torch.zeros(3, 3)
    with pytest.raises(ConfigError):
        tiny_model.init_from_reference(wrong_shape)


def test_hypothesis_permutation_equivariance(tiny_config):
    model = create_model(tiny_config, seed=4)
    (pixels,) = windows_batch(tiny_config, seed=9)
    prompt = Prompt(box=(2.0, 2.0, 18.0, 18.0))
    masks, ious = run_window(model, pixels, prompt)
    perm = (2, 0, 1)
    model.decoder.permute_hypotheses(perm)
    pmasks, pious = run_window(model, pixels, prompt)
    for j in range(3):
        assert np.allclose(pmasks[:, :, :, j], masks[:, :, :, perm[j]], atol=1e-5)
        assert np.allclose(pious[j], ious[perm[j]], atol=1e-6)


# ---------------------------------------------------------------------------
# Checkpointing


def test_checkpoint_roundtrip_bitwise(tmp_path, tiny_config):
    model = create_model(tiny_config, seed=5)
    path = save_checkpoint(model, tmp_path / "m.npz")
    back = load_checkpoint(path)
    assert back.config == tiny_config
    for (ka, va), (kb, vb) in zip(
        model.state_dict().items(), back.state_dict().items()
    ):
        assert ka == kb
        assert torch.equal(va, vb), ka


def test_checkpoint_corrupt_and_missing(tmp_path, tiny_config):
    with pytest.raises(CorruptDataError):
        load_checkpoint(tmp_path / "missing.npz")
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(CorruptDataError):
        load_checkpoint(bad)
    model = create_model(tiny_config, seed=5)
    path = save_checkpoint(model, tmp_path / "m.npz")
    # drop one weight array from the archive
    import numpy as _np

    data = dict(_np.load(path, allow_pickle=False))
    victim = next(k for k in data if k != "__meta__")
    data.pop(victim)
    _np.savez(tmp_path / "partial.npz", **data)
    with pytest.raises(CorruptDataError):
        load_checkpoint(tmp_path / "partial.npz")
