"""Losses, prompt simulation and the adapter fine-tuning loop.

The loss treats each of the three hypotheses as a candidate explanation of
the window: every hypothesis is scored with the same masked segmentation +
IoU-regression objective, and only the best one backpropagates.  Slices whose
indicator flag is 0 contribute nothing, which is what lets 2-D pseudo-labeled
samples train alongside fully labeled 3-D windows.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidInputError, TrainingFault
from .model import PromptableSegmenter, window_to_tensor
from .model.decoder import NUM_HYPOTHESES
from .prompts import Prompt
from .volume_io import SliceWindow, Volume, VolumeMask, extract_windows, resize_window

DICE_EPS = 1e-6

# relative weight of the pixel term vs the overlap term
CE_WEIGHT = 20.0
DICE_WEIGHT = 1.0

BOX_NOISE_FRACTION = 0.1  # sigma as a fraction of the box side
BOX_NOISE_CAP = 20.0      # per-coordinate cap in pixels


@dataclass
class OptimizerConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.1

    def build(self, model: PromptableSegmenter) -> torch.optim.Optimizer:
        params = [p for _, p in model.trainable_parameters()]
        return torch.optim.AdamW(params, lr=self.lr, betas=self.betas,
                                 weight_decay=self.weight_decay)


@dataclass
class TrainingSample:
    """One window plus supervision; prompts are re-simulated from the seed."""

    window: SliceWindow
    prompt_seed: int = 0

    def __post_init__(self):
        if self.window.labels is None:
            raise InvalidInputError("training samples need labeled windows")
        if not any(self.window.indicator):
            raise InvalidInputError("sample indicator marks no supervised slice")
        if self.window.indicator[1] != 1:
            raise InvalidInputError("the central slice must always be supervised")


# ---------------------------------------------------------------------------
# Loss terms


def dice_loss(logits: torch.Tensor, gt: torch.Tensor, indicator, eps: float = DICE_EPS):
    """Soft dice loss averaged over supervised slices.

    ``logits`` and ``gt`` are ``(H, W, S)``; slices with ``indicator[i] == 0``
    are excluded entirely and receive no gradient.
    """
    ind = [i for i, v in enumerate(indicator) if v]
    if not ind:
        raise InvalidInputError("dice_loss needs at least one supervised slice")
    probs = torch.sigmoid(logits)
    terms = []
    for i in ind:
        p = probs[:, :, i]
        g = gt[:, :, i].to(p.dtype)
        inter = (p * g).sum()
        terms.append(1.0 - (2.0 * inter + eps) / (p.sum() + g.sum() + eps))
    return torch.stack(terms).mean()


def seg_loss(logits: torch.Tensor, gt: torch.Tensor, indicator,
             ce_weight: float = CE_WEIGHT, dice_weight: float = DICE_WEIGHT):
    """Weighted cross-entropy + dice, masked per slice by the indicator."""
    ind = [i for i, v in enumerate(indicator) if v]
    if not ind:
        raise InvalidInputError("seg_loss needs at least one supervised slice")
    ce_terms = []
    for i in ind:
        ce_terms.append(
            torch.nn.functional.binary_cross_entropy_with_logits(
                logits[:, :, i], gt[:, :, i].to(logits.dtype)
            )
        )
    ce = torch.stack(ce_terms).mean()
    return ce_weight * ce + dice_weight * dice_loss(logits, gt, indicator)


def iou_loss(predicted_iou: torch.Tensor, logits: torch.Tensor, gt: torch.Tensor, indicator):
    """Squared error between predicted and actual IoU of the binarized mask.

    Actual IoU is only well defined when all three slices carry labels, so
    partially supervised samples contribute exactly zero from this term.
    """
    if tuple(int(v) for v in indicator) != (1, 1, 1):
        return torch.zeros((), dtype=predicted_iou.dtype, device=predicted_iou.device)
    with torch.no_grad():
        pred = logits > 0
        gt_b = gt.bool()
        inter = (pred & gt_b).sum()
        union = (pred | gt_b).sum()
        target = torch.where(
            union > 0,
            inter.to(predicted_iou.dtype) / union.to(predicted_iou.dtype),
            torch.ones((), dtype=predicted_iou.dtype),
        )
    return (predicted_iou - target) ** 2


def hypothesis_losses(masks: torch.Tensor, ious: torch.Tensor, gt: torch.Tensor,
                      indicator, ce_weight: float = CE_WEIGHT,
                      dice_weight: float = DICE_WEIGHT) -> torch.Tensor:
    """Per-hypothesis total loss, shape ``(NUM_HYPOTHESES,)``.

    ``masks`` is ``(H, W, S, J)`` logits, ``ious`` is ``(J,)``.
    """
    losses = []
    for j in range(masks.shape[3]):
        total = seg_loss(masks[:, :, :, j], gt, indicator, ce_weight, dice_weight)
        total = total + iou_loss(ious[j], masks[:, :, :, j], gt, indicator)
        losses.append(total)
    return torch.stack(losses)


def select_head(losses) -> int:
    """Index of the cheapest hypothesis; ties go to the lowest index."""
    values = [float(v) for v in losses]
    if any(not math.isfinite(v) for v in values):
        raise TrainingFault(f"non-finite hypothesis losses: {values}")
    best = min(range(len(values)), key=lambda i: (values[i], i))
    return best


# ---------------------------------------------------------------------------
# Prompt simulation


def simulate_prompt(gt_central: np.ndarray, rng: np.random.Generator) -> Prompt:
    """Draw a training prompt from the central-slice ground truth.

    A fair coin picks between a uniform foreground click and the tight
    bounding box jittered per coordinate with gaussian noise (sigma = 10% of
    the corresponding box side, each draw capped at 20 px), clamped back into
    the slice.
    """
    gt_central = np.asarray(gt_central).astype(bool)
    ys, xs = np.nonzero(gt_central)
    if len(xs) == 0:
        raise InvalidInputError("cannot simulate a prompt for an empty mask")
    h, w = gt_central.shape
    if rng.random() < 0.5:
        pick = int(rng.integers(len(xs)))
        return Prompt(points=np.array([[float(xs[pick]), float(ys[pick])]]),
                      point_labels=np.array([1]))
    x0, y0, x1, y1 = float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())
    side_x = x1 - x0 + 1.0
    side_y = y1 - y0 + 1.0
    noise = [
        float(np.clip(rng.normal(0.0, BOX_NOISE_FRACTION * side), -BOX_NOISE_CAP, BOX_NOISE_CAP))
        for side in (side_x, side_y, side_x, side_y)
    ]
    nx0 = float(np.clip(x0 + noise[0], 0, w - 1))
    ny0 = float(np.clip(y0 + noise[1], 0, h - 1))
    nx1 = float(np.clip(x1 + noise[2], 0, w - 1))
    ny1 = float(np.clip(y1 + noise[3], 0, h - 1))
    if nx1 < nx0:
        nx0, nx1 = nx1, nx0
    if ny1 < ny0:
        ny0, ny1 = ny1, ny0
    return Prompt(box=(nx0, ny0, nx1, ny1))


# ---------------------------------------------------------------------------
# Dataset assembly


def samples_from_volume(volume: Volume, mask: VolumeMask, model_size: int,
                        axes=("z",), seed: int = 0) -> list[TrainingSample]:
    """Extract labeled windows along the given axes, resized to model space."""
    rng = np.random.default_rng(seed)
    samples = []
    for axis in axes:
        for window in extract_windows(volume, mask, axis):
            resized = resize_window(window, (model_size, model_size))
            samples.append(TrainingSample(resized, prompt_seed=int(rng.integers(2**31))))
    return samples


# ---------------------------------------------------------------------------
# Optimization loop


@dataclass
class StepStats:
    step: int
    loss: float
    head_counts: tuple[int, int, int]
    seconds: float


@dataclass
class FitResult:
    steps: int
    final_loss: float
    history: list[StepStats] = field(default_factory=list)


def train_step(model: PromptableSegmenter, batch: list[TrainingSample],
               optimizer: torch.optim.Optimizer, step: int,
               ce_weight: float = CE_WEIGHT, dice_weight: float = DICE_WEIGHT) -> StepStats:
    """One optimization step over a batch of samples.

    Prompts are re-simulated per step from each sample's seed so repeated
    passes over the data see fresh jitter.  Raises ``TrainingFault`` on a
    non-finite loss before any weights are touched.
    """
    t0 = time.perf_counter()
    model.train()
    pixels = torch.stack([window_to_tensor(s.window.pixels) for s in batch])
    prompts = []
    for s in batch:
        rng = np.random.default_rng((s.prompt_seed, step))
        prompts.append(simulate_prompt(s.window.labels[:, :, 1], rng))
    embed = model.encode_image(pixels)
    total = torch.zeros(())
    head_counts = [0, 0, 0]
    for i, sample in enumerate(batch):
        sparse, dense = model.encode_prompts(prompts[i])
        masks, ious = model.decode_masks(embed[i : i + 1], sparse[None], dense[None])
        gt = torch.from_numpy(sample.window.labels.astype(np.float32))
        losses = hypothesis_losses(masks[0], ious[0], gt, sample.window.indicator,
                                   ce_weight, dice_weight)
        k = select_head(losses.detach())
        head_counts[k] += 1
        total = total + losses[k]
    total = total / len(batch)
    if not torch.isfinite(total):
        raise TrainingFault(f"non-finite loss at step {step}: {float(total)}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return StepStats(step=step, loss=float(total.detach()),
                     head_counts=tuple(head_counts), seconds=time.perf_counter() - t0)


def fit(model: PromptableSegmenter, samples: list[TrainingSample], steps: int,
        batch_size: int = 4, opt: OptimizerConfig | None = None, seed: int = 0,
        metrics_path: Path | str | None = None, log_every: int = 25,
        logger=None) -> FitResult:
    """Train for a fixed number of steps with uniform batch sampling.

    Batches mix whatever sample kinds are present (fully labeled windows and
    pseudo-labeled ones) uniformly at random.  Step metrics stream to a JSONL
    file when ``metrics_path`` is given.
    """
    if not samples:
        raise InvalidInputError("no training samples")
    if steps < 1 or batch_size < 1:
        raise InvalidInputError("steps and batch_size must be >= 1")
    optimizer = (opt or OptimizerConfig()).build(model)
    rng = np.random.default_rng(seed)
    history: list[StepStats] = []
    sink = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        sink = metrics_path.open("w")
    try:
        for step in range(steps):
            picks = rng.integers(0, len(samples), size=batch_size)
            batch = [samples[int(i)] for i in picks]
            stats = train_step(model, batch, optimizer, step)
            history.append(stats)
            if sink is not None:
                sink.write(json.dumps({
                    "step": stats.step,
                    "loss": stats.loss,
                    "heads": list(stats.head_counts),
                    "seconds": round(stats.seconds, 4),
                }) + "\n")
            if logger is not None and (step % log_every == 0 or step == steps - 1):
                logger.info("step %d/%d loss %.4f heads %s",
                            step + 1, steps, stats.loss, stats.head_counts)
    finally:
        if sink is not None:
            sink.close()
    return FitResult(steps=steps, final_loss=history[-1].loss, history=history)
