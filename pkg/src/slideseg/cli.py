"""Command-line entry point.

Subcommands cover the whole workflow: synthesize phantoms, normalize volumes,
train, mine pseudo-labels, run prompted inference, evaluate, and serve the
annotation HTTP API.  Exit codes: 0 success, 1 usage error, 2 unreadable or
inconsistent data, 3 runtime failure.

Environment overrides (used when the corresponding flag is absent):
    SLIDESEG_SEED   default random seed
    SLIDESEG_JOBS   worker threads (compute and service jobs)
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CorruptDataError, InvalidInputError, SlideSegError
from .prompts import Prompt

log = logging.getLogger("slideseg")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; this CLI reserves 2 for data
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def env_seed(value: int | None) -> int:
    if value is not None:
        return value
    raw = os.environ.get("SLIDESEG_SEED")
    if raw is not None:
        try:
            return int(raw)
        except ValueError as exc:
            raise UsageError(f"SLIDESEG_SEED must be an integer, got {raw!r}") from exc
    return 0


def env_jobs(value: int | None) -> int:
    if value is not None:
        return value
    raw = os.environ.get("SLIDESEG_JOBS")
    if raw is not None:
        try:
            jobs = int(raw)
        except ValueError as exc:
            raise UsageError(f"SLIDESEG_JOBS must be an integer, got {raw!r}") from exc
        if jobs < 1:
            raise UsageError("SLIDESEG_JOBS must be >= 1")
        return jobs
    return 1


def parse_prompt(spec: str) -> Prompt:
    """Parse ``box:x0,y0,x1,y1`` or ``point:x,y`` prompt specs."""
    kind, _, payload = spec.partition(":")
    try:
        values = [float(v) for v in payload.split(",")] if payload else []
    except ValueError as exc:
        raise UsageError(f"bad prompt coordinates in {spec!r}") from exc
    try:
        if kind == "box" and len(values) == 4:
            return Prompt(box=tuple(values))
        if kind == "point" and len(values) == 2:
            return Prompt(points=np.array([values]), point_labels=np.array([1]))
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc
    raise UsageError(f"prompt must be 'box:x0,y0,x1,y1' or 'point:x,y', got {spec!r}")


def parse_shape(spec: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(v) for v in spec.split(","))
    except ValueError as exc:
        raise UsageError(f"bad shape {spec!r}") from exc
    if len(parts) != 3:
        raise UsageError(f"shape needs three comma-separated sizes, got {spec!r}")
    return parts


def _load_cases(directory: Path):
    from .volume_io import load_mask, load_volume

    directory = Path(directory)
    sidecars = sorted(directory.glob("*.vol.json"))
    if not sidecars:
        raise CorruptDataError(f"no volumes found in {directory}")
    cases = []
    for sidecar in sidecars:
        volume = load_volume(sidecar)
        mask_path = sidecar.with_name(f"{volume.id}.mask.rle.json")
        mask = load_mask(mask_path) if mask_path.exists() else None
        cases.append((volume, mask))
    return cases


def _normalized(volume):
    from .volume_io import clip_and_normalize

    return clip_and_normalize(volume)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    from .bench import PHANTOM_KINDS, make_phantom
    from .volume_io import save_mask, save_volume

    if args.kind not in PHANTOM_KINDS:
        raise UsageError(f"--kind must be one of {PHANTOM_KINDS}")
    seed = env_seed(args.seed)
    out = Path(args.out)
    for i in range(args.count):
        vid = args.id if args.id and args.count == 1 else f"{args.kind}-{seed + i:04d}"
        volume, mask = make_phantom(args.kind, parse_shape(args.shape), seed=seed + i,
                                    volume_id=vid)
        sidecar = save_volume(volume, out)
        save_mask(mask, out, volume.id)
        print(sidecar)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .volume_io import load_volume, save_volume

    out = Path(args.out)
    for path in args.volumes:
        volume = load_volume(Path(path))
        normalized = _normalized(volume)
        print(save_volume(normalized, out))
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from .model import EncoderConfig, create_model, save_checkpoint
    from .pseudo_labels import load_pseudo_records, pseudo_training_samples
    from .report import plot_loss_curve
    from .training import OptimizerConfig, fit, samples_from_volume

    torch.set_num_threads(env_jobs(args.jobs))
    seed = env_seed(args.seed)
    config = EncoderConfig(
        image_size=args.image_size, patch_size=args.patch_size, embed_dim=args.dim,
        depth=args.depth, heads=args.heads, lora_rank=args.rank,
    )
    axes = tuple(args.axes.split(","))
    cases = _load_cases(Path(args.volumes))
    samples = []
    volumes_by_id = {}
    for i, (volume, mask) in enumerate(cases):
        normalized = _normalized(volume)
        volumes_by_id[volume.id] = normalized
        if mask is None:
            continue
        samples.extend(samples_from_volume(normalized, mask, config.image_size,
                                           axes=axes, seed=seed + i))
    for pseudo_path in args.pseudo or []:
        records = load_pseudo_records(Path(pseudo_path))
        samples.extend(pseudo_training_samples(records, volumes_by_id,
                                               config.image_size, seed=seed))
    if args.max_samples and len(samples) > args.max_samples:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(samples), size=args.max_samples, replace=False)
        samples = [samples[int(i)] for i in sorted(picks)]
    if not samples:
        raise CorruptDataError("training set is empty (no labeled windows or pseudo records)")
    log.info("training on %d samples for %d steps", len(samples), args.steps)

    torch.manual_seed(seed)
    model = create_model(config, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    result = fit(model, samples, steps=args.steps, batch_size=args.batch_size,
                 opt=OptimizerConfig(lr=args.lr), seed=seed,
                 metrics_path=metrics_path, logger=log)
    ckpt = save_checkpoint(model, out / "checkpoint.npz")
    history = [{"step": h.step, "loss": h.loss} for h in result.history]
    plot_loss_curve(history, out / "loss_curve.png")
    print(ckpt)
    return EXIT_OK


def cmd_pseudo(args) -> int:
    from .pseudo_labels import (
        ModelSliceSegmenter,
        ThresholdSliceSegmenter,
        generate_pseudo_records,
        save_pseudo_records,
    )
    from .volume_io import load_volume

    volume = load_volume(Path(args.volume))
    if args.checkpoint:
        from .inference import ModelPredictor
        from .model import load_checkpoint

        segmenter = ModelSliceSegmenter(ModelPredictor(load_checkpoint(Path(args.checkpoint))))
    else:
        segmenter = ThresholdSliceSegmenter()
    normalized = _normalized(volume)
    depth = normalized.extent(args.axis)
    centers = range(1, depth - 1, args.center_step)
    records = generate_pseudo_records(
        segmenter, normalized, axis=args.axis, centers=centers,
        n_segments=args.segments, mean_min=args.mean_min,
    )
    path = save_pseudo_records(records, Path(args.out))
    log.info("wrote %d pseudo records", len(records))
    print(path)
    return EXIT_OK


def cmd_infer(args) -> int:
    from .inference import ModelPredictor, segment_everything, segment_volume
    from .model import load_checkpoint
    from .volume_io import load_volume, save_mask

    volume = load_volume(Path(args.volume))
    depth = volume.extent(args.axis)
    if not 1 <= args.start_index <= depth - 2:
        raise UsageError(
            f"--start-index {args.start_index} outside interior [1, {depth - 2}] "
            f"of axis {args.axis}"
        )
    if not args.everything and not args.prompt:
        raise UsageError("either --prompt or --everything is required")
    normalized = _normalized(volume)
    predictor = ModelPredictor(load_checkpoint(Path(args.checkpoint)))
    if args.everything:
        mask, results = segment_everything(
            normalized, args.axis, args.start_index, predictor,
            grid_step=args.grid_step, max_batch=args.max_batch,
        )
        for r in results:
            log.info("instance: forward=%s backward=%s", r.forward_reason, r.backward_reason)
    else:
        prompt = parse_prompt(args.prompt)
        plane = tuple(
            s for i, s in enumerate(volume.shape)
            if i != {"z": 0, "y": 1, "x": 2}[args.axis]
        )
        try:
            prompt.validate_bounds(*plane)
        except InvalidInputError as exc:
            raise UsageError(str(exc)) from exc
        result = segment_volume(normalized, args.axis, args.start_index, prompt, predictor,
                                max_batch=args.max_batch)
        mask = result.mask
        log.info("forward=%s backward=%s windows=%d",
                 result.forward_reason, result.backward_reason, result.windows_run)
    path = save_mask(mask, Path(args.out), volume.id)
    print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .bench import (
        cycle_records,
        evaluate_volumes,
        noisy_prompt_suite,
        per_slice_image_records,
        prompt_efficiency,
        propagation_image_records,
        zspacing_suite,
    )
    from .inference import ModelPredictor
    from .model import load_checkpoint
    from .report import (
        config_hash,
        metric_rows,
        plot_efficiency,
        plot_noisy_grid,
        plot_volume_dice,
        plot_zspacing,
        write_table,
    )

    cases = [(v, m) for v, m in _load_cases(Path(args.testset)) if m is not None]
    if not cases:
        raise CorruptDataError(f"no labeled volumes in {args.testset}")
    cases = [(_normalized(v), m) for v, m in cases]
    model = load_checkpoint(Path(args.checkpoint))
    predictor = ModelPredictor(model)
    cfg = config_hash({"model": model.config.to_dict(), "testset": sorted(v.id for v, _ in cases)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suites = ("dice", "noisy", "zspacing", "efficiency") if args.suite == "all" else (args.suite,)
    metrics: dict[str, float] = {}

    if "dice" in suites or "efficiency" in suites:
        results = evaluate_volumes(predictor, cases, axis=args.axis, max_batch=args.max_batch)
        metrics["volume_dice_mean"] = float(np.mean([r.dice for r in results]))
        write_table(out / "volume_dice.csv",
                    [{"metric": f"dice[{r.volume_id}]", "value": r.dice, "config_hash": cfg}
                     for r in results],
                    ["metric", "value", "config_hash"])
        plot_volume_dice(results, out / "volume_dice.png")
        if "efficiency" in suites:
            budget = args.budget
            prop = prompt_efficiency(cycle_records(propagation_image_records(results), budget),
                                     budget)
            base_records = per_slice_image_records(predictor, cases, axis=args.axis)
            base = prompt_efficiency(cycle_records(base_records, budget), budget)
            metrics["efficiency_propagated"] = prop
            metrics["efficiency_per_slice"] = base
            metrics["efficiency_ratio"] = prop / base if base else float("inf")
            plot_efficiency({"propagated": prop, "per-slice": base}, out / "efficiency.png")

    if "noisy" in suites:
        rows = noisy_prompt_suite(predictor, cases, axis=args.axis, max_batch=args.max_batch)
        write_table(out / "noisy_prompts.csv",
                    [{"metric": f"dice[scale={r['scale']:.2f},shift={r['translate']:+.2f}]",
                      "value": r["dice"], "config_hash": cfg} for r in rows],
                    ["metric", "value", "config_hash"])
        plot_noisy_grid(rows, out / "noisy_prompts.png")
        identity = [r for r in rows if r["scale"] == 1.0 and r["translate"] == 0.0]
        if identity:
            metrics["noisy_identity_dice"] = identity[0]["dice"]

    if "zspacing" in suites:
        rows = zspacing_suite(predictor, cases, axis=args.axis, max_batch=args.max_batch)
        write_table(out / "zspacing.csv",
                    [{"metric": f"dice[ratio={r['ratio']:.1f}]", "value": r["dice"],
                      "config_hash": cfg} for r in rows],
                    ["metric", "value", "config_hash"])
        plot_zspacing(rows, out / "zspacing.png")
        for r in rows:
            metrics[f"zspacing_dice_{r['ratio']:.1f}"] = r["dice"]

    write_table(out / "metrics.csv", metric_rows(metrics, cfg),
                ["metric", "value", "config_hash"])
    for name, value in metrics.items():
        print(f"{name}={value}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .inference import ModelPredictor
    from .model import load_checkpoint
    from .service import create_app

    predictor = ModelPredictor(load_checkpoint(Path(args.checkpoint)))
    app = create_app(Path(args.store), predictor, max_workers=env_jobs(args.jobs))
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="slideseg", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"slideseg {__version__}")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate phantom volumes with ground truth")
    p.add_argument("--kind", required=True)
    p.add_argument("--shape", default="64,64,64")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--id", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="clamp and normalize volumes to display range")
    p.add_argument("volumes", nargs="+", help="paths to .vol.json sidecars")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="fine-tune the segmenter on labeled windows")
    p.add_argument("--volumes", required=True, help="directory of volumes + masks")
    p.add_argument("--pseudo", action="append", help="pseudo-label JSONL (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--axes", default="z")
    p.add_argument("--max-samples", type=int, default=0)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--dim", type=int, default=96)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--rank", type=int, default=4)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo", help="mine pseudo-labels from an unlabeled volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", default="z", choices=("z", "y", "x"))
    p.add_argument("--center-step", type=int, default=4)
    p.add_argument("--segments", type=int, default=64)
    p.add_argument("--mean-min", type=float, default=20.0)
    p.add_argument("--checkpoint", default=None,
                   help="use a trained model instead of the threshold segmenter")
    p.set_defaults(func=cmd_pseudo)

    p = sub.add_parser("infer", help="segment a volume from one prompt")
    p.add_argument("--volume", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default=None, help="box:x0,y0,x1,y1 or point:x,y")
    p.add_argument("--everything", action="store_true",
                   help="grid-probe the start slice and segment every instance")
    p.add_argument("--axis", default="z", choices=("z", "y", "x"))
    p.add_argument("--start-index", type=int, required=True)
    p.add_argument("--grid-step", type=int, default=16)
    p.add_argument("--max-batch", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled test set")
    p.add_argument("--testset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--suite", default="all",
                   choices=("all", "dice", "noisy", "zspacing", "efficiency"))
    p.add_argument("--axis", default="z", choices=("z", "y", "x"))
    p.add_argument("--budget", type=int, default=1000)
    p.add_argument("--max-batch", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"slideseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidInputError as exc:
        print(f"slideseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorruptDataError, FileNotFoundError) as exc:
        print(f"slideseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SlideSegError as exc:
        print(f"slideseg: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
