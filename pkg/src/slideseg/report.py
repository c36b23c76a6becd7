"""Flat result tables and the matplotlib figures rendered next to them."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def config_hash(config: dict) -> str:
    """Short stable digest of a configuration dict."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def write_table(path: Path | str, rows: list[dict], columns: list[str]) -> Path:
    """Write rows as CSV with a fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})
    return path


def metric_rows(metrics: dict[str, float], cfg_hash: str) -> list[dict]:
    return [{"metric": name, "value": value, "config_hash": cfg_hash}
            for name, value in metrics.items()]


def plot_loss_curve(history, path: Path | str) -> Path:
    """Loss-vs-step curve from a list of dicts with ``step`` and ``loss``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    steps = [h["step"] for h in history]
    losses = [h["loss"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=1.0)
    if len(losses) >= 20:
        kernel = np.ones(10) / 10
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[9:], smooth, lw=2.0, label="10-step mean")
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_noisy_grid(rows: list[dict], path: Path | str) -> Path:
    """Heatmap of dice across the (scale, translate) perturbation grid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scales = sorted({r["scale"] for r in rows})
    shifts = sorted({r["translate"] for r in rows})
    grid = np.full((len(scales), len(shifts)), np.nan)
    for r in rows:
        grid[scales.index(r["scale"]), shifts.index(r["translate"])] = r["dice"]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(shifts)), [f"{s:+.0%}" for s in shifts])
    ax.set_yticks(range(len(scales)), [f"{s:.2f}x" for s in scales])
    ax.set_xlabel("box translation")
    ax.set_ylabel("box scale")
    ax.set_title("dice under box perturbations")
    for i in range(len(scales)):
        for j in range(len(shifts)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center",
                        color="white" if grid[i, j] < 0.6 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_zspacing(rows: list[dict], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ratios = [r["ratio"] for r in rows]
    dices = [r["dice"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(ratios, dices, marker="o")
    ax.set_xlabel("z-spacing ratio")
    ax.set_ylabel("mean dice")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("dice vs slice thinning")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_efficiency(counts: dict[str, int], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(counts)
    values = [counts[n] for n in names]
    fig, ax = plt.subplots(figsize=(5, 4))
    bars = ax.bar(names, values, color=["#2a6f97", "#e07a5f"][: len(names)])
    ax.bar_label(bars)
    ax.set_ylabel("slices annotated within budget")
    ax.set_title("prompt efficiency")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_volume_dice(results, path: Path | str) -> Path:
    """Per-volume dice bars for an evaluation run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [r.volume_id for r in results]
    values = [r.dice for r in results]
    fig, ax = plt.subplots(figsize=(max(5, 0.6 * len(names) + 2), 4))
    ax.bar(range(len(names)), values, color="#2a6f97")
    ax.axhline(float(np.mean(values)), color="#e07a5f", ls="--",
               label=f"mean {np.mean(values):.3f}")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("volume dice")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
