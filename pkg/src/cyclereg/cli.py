"""Command-line surface: phantom synthesis, training, label generation,
inference, evaluation, and plot emission.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime divergence.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_config, save_config
from .errors import DataError, DivergenceError, UsageError
from .features import init_state, load_checkpoint, save_checkpoint
from .grid import upsample_field, warp_volume, zero_field
from .io import TrainingSet, load_dataset, load_field, read_json, save_field, write_json
from .metrics import (
    LandmarkSet,
    cumulative_dice_curve,
    dice,
    mean_endpoint_error,
    sd_log_jacobian,
    target_registration_error,
)
from .phantom import PhantomSpec, make_dataset
from .refine import register_pair
from .selftrain import PseudoLabelStore, generate_pseudo_labels, run_self_training


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="YAML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (dotted path)")
    parser.add_argument("--seed", type=int, default=None, help="run seed override")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _parse_dims(values) -> tuple[int, int, int]:
    if len(values) == 1:
        return (values[0],) * 3
    if len(values) == 3:
        return tuple(values)
    raise UsageError("--dims takes one or three integers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyclereg",
                                     description="Unsupervised 3D registration by "
                                                 "cyclical self-training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--dims", type=int, nargs="+", default=[64])
    p.add_argument("--structures", type=int, default=6)
    p.add_argument("--magnitude", type=float, default=6.0)
    p.add_argument("--smoothness", type=float, default=8.0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--texture-amp", type=float, default=0.25)
    p.add_argument("--texture-sigma", type=float, default=2.5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="run cyclical self-training")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--split", default=None, help="case split to train on")
    p.add_argument("--pairing", default=None, choices=["unordered", "ordered", "explicit"])
    p.add_argument("--resume", action="store_true")
    _add_config_args(p)

    p = sub.add_parser("pseudo-labels", help="one pseudo-label generation pass")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="label store directory")
    p.add_argument("--checkpoint", default=None, help="feature state (default: random init)")
    p.add_argument("--stage", type=int, default=None,
                   help="store version index (default: checkpoint stage, else 0)")
    p.add_argument("--split", default=None)
    p.add_argument("--pairing", default=None, choices=["unordered", "ordered", "explicit"])
    _add_config_args(p)

    p = sub.add_parser("infer", help="write displacement fields for dataset pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="field output directory")
    p.add_argument("--split", default=None)
    p.add_argument("--pairing", default=None, choices=["unordered", "ordered", "explicit"])
    p.add_argument("--no-refine", action="store_true",
                   help="emit the raw optimizer field (upsampled) without refinement")
    p.add_argument("--format", choices=["nii.gz", "rgf"], default="nii.gz")
    _add_config_args(p)

    p = sub.add_parser("evaluate", help="Dice / SDlogJ / TRE metrics for field files")
    p.add_argument("--data", required=True)
    p.add_argument("--fields", default=None, help="directory of <pair_id> field files")
    p.add_argument("--out", required=True, help="metrics output directory")
    p.add_argument("--split", default=None)
    p.add_argument("--pairing", default=None, choices=["unordered", "ordered", "explicit"])
    p.add_argument("--identity", action="store_true",
                   help="evaluate the identity (zero) field instead of --fields")

    p = sub.add_parser("plot", help="cumulative-Dice and per-stage curves")
    p.add_argument("--metrics", nargs="+", required=True,
                   help="metrics.csv files (one curve each)")
    p.add_argument("--labels", nargs="+", default=None,
                   help="legend labels, one per metrics file")
    p.add_argument("--out", required=True, help="plot output directory")
    p.add_argument("--format", choices=["png", "svg"], default="png")
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _snapshot_args(out_dir, args) -> None:
    """Resolved-parameter snapshot for commands that do not take a RunConfig."""
    resolved = {k: v for k, v in vars(args).items() if k != "command"}
    write_json(Path(out_dir) / "resolved_args.json",
               {"command": args.command, "args": resolved})


def cmd_synth(args) -> int:
    spec = PhantomSpec(dims=_parse_dims(args.dims), num_structures=args.structures,
                       field_sigma=args.smoothness, field_magnitude=args.magnitude,
                       noise_sigma=args.noise, texture_amp=args.texture_amp,
                       texture_sigma=args.texture_sigma, seed=args.seed)
    make_dataset(spec, args.pairs, args.out)
    _snapshot_args(args.out, args)
    print(f"wrote {args.pairs} phantom pairs to {args.out}")
    return 0


class _RunLock:
    """Single-writer guard for resumable run directories."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(f"run directory is locked by another writer: {self.path} "
                            f"(remove the lock file if that run is dead)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc_info):
        self.path.unlink(missing_ok=True)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    data = load_dataset(args.data, split=args.split, pairing=args.pairing)
    out = Path(args.out)
    with _RunLock(out):
        save_config(out / "resolved_config.yaml", cfg)
        _, report = run_self_training(data, cfg.schedule, cfg.selftraining(),
                                      seed=cfg.seed, out_dir=out, resume=args.resume)
    stages = sorted(report["stages"], key=lambda s: s["stage"])
    for s in stages:
        print(f"stage {s['stage']}: loss {s['loss_first']:.4f} -> {s['loss_last']:.4f}, "
              f"mean difficulty {s.get('mean_difficulty', float('nan')):.4f}")
    print(f"run complete: {len(stages)} stages in {out}")
    return 0


def cmd_pseudo_labels(args) -> int:
    cfg = _resolve_config(args)
    data = load_dataset(args.data, split=args.split, pairing=args.pairing)
    state = load_checkpoint(args.checkpoint) if args.checkpoint else init_state(cfg.seed)
    stage = args.stage if args.stage is not None else state.stage
    out = Path(args.out)
    save_config(out / "resolved_config.yaml", cfg)
    store = PseudoLabelStore(out)
    generate_pseudo_labels(state, data, cfg.selftraining(), store, stage)
    difficulty = float(np.mean(store.difficulties(stage)))
    print(f"stored {len(data)} pseudo labels (stage {stage}, "
          f"mean difficulty {difficulty:.4f}) in {out}")
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    data = load_dataset(args.data, split=args.split, pairing=args.pairing)
    state = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    save_config(out / "resolved_config.yaml", cfg)
    refine_cfg = cfg.refine
    if args.no_refine:
        refine_cfg = replace(refine_cfg, fb_iterations=0, enable_second_warp=False,
                             enable_instance_opt=False)
    for index, pair in enumerate(data.pairs):
        fixed, moving = data.load_pair(index)
        field = register_pair(fixed, moving, state, refine_cfg, cfg.convex)
        save_field(out / f"{pair.pair_id}.{args.format}", field, spacing=fixed.spacing)
    print(f"wrote {len(data)} fields to {out}")
    return 0


def _field_for_pair(args, pair, shape):
    if args.identity:
        return zero_field(shape)
    if args.fields is None:
        raise UsageError("evaluate needs --fields unless --identity is set")
    for suffix in (".nii.gz", ".rgf", ".nii"):
        candidate = Path(args.fields) / f"{pair.pair_id}{suffix}"
        if candidate.exists():
            return load_field(candidate)
    raise DataError(f"no field file for pair {pair.pair_id} under {args.fields}")


def cmd_evaluate(args) -> int:
    data = load_dataset(args.data, split=args.split, pairing=args.pairing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot_args(out, args)
    rows: list[tuple[str, str, float]] = []
    for index, pair in enumerate(data.pairs):
        fixed, _ = data.load_pair(index)
        field = _field_for_pair(args, pair, fixed.shape)
        if field.shape != fixed.shape:
            field = upsample_field(field, fixed.shape)
        rows.append((pair.pair_id, "sd_log_jacobian", sd_log_jacobian(field)))
        lab_f, lab_m = pair.fixed.load_label(), pair.moving.load_label()
        if lab_f is not None and lab_m is not None:
            result = dice(warp_volume(lab_m, field), lab_f)
            rows.append((pair.pair_id, "dice_mean", result.mean))
            for cls, score in sorted(result.per_class.items()):
                rows.append((pair.pair_id, f"dice_class_{cls:02d}", score))
        lm_f, lm_m = pair.fixed.load_landmarks(), pair.moving.load_landmarks()
        if lm_f is not None and lm_m is not None:
            tre = target_registration_error(LandmarkSet(lm_f, fixed.spacing),
                                            LandmarkSet(lm_m, fixed.spacing), field)
            rows.append((pair.pair_id, "tre_mean_mm", tre.mean))
        gt = pair.load_gt_field()
        if gt is not None:
            rows.append((pair.pair_id, "epe_mean_mm",
                         mean_endpoint_error(field, gt, fixed.spacing)))
    csv_path = out / "metrics.csv"
    with csv_path.open("w") as fh:
        fh.write("pair_id,metric,value\n")
        for pair_id, metric, value in rows:
            fh.write(f"{pair_id},{metric},{value!r}\n")
    summary: dict[str, float] = {}
    for _, metric, value in rows:
        summary.setdefault(metric, []).append(value)
    summary = {metric: float(np.mean(values)) for metric, values in sorted(summary.items())}
    write_json(out / "summary.json", summary)
    shown = {k: round(v, 4) for k, v in summary.items() if not k.startswith("dice_class")}
    print(f"evaluated {len(data)} pairs -> {csv_path}")
    print(f"summary: {shown}")
    return 0


def _read_metric_rows(path) -> dict[str, list[float]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing metrics file: {path}")
    by_metric: dict[str, list[float]] = {}
    with path.open() as fh:
        header = fh.readline()
        if not header.startswith("pair_id"):
            raise DataError(f"{path}: not a metrics csv")
        for line in fh:
            if not line.strip():
                continue
            _, metric, value = line.rstrip("\n").split(",")
            by_metric.setdefault(metric, []).append(float(value))
    return by_metric


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = args.labels or [Path(m).parent.name or f"set {i}"
                             for i, m in enumerate(args.metrics)]
    if len(labels) != len(args.metrics):
        raise UsageError("--labels must match --metrics one to one")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot_args(out, args)

    fig, ax = plt.subplots(figsize=(6, 4))
    mean_dices = []
    for label, metrics_path in zip(labels, args.metrics):
        by_metric = _read_metric_rows(metrics_path)
        per_structure = [v for metric, values in by_metric.items()
                         if metric.startswith("dice_class") for v in values]
        if not per_structure:
            raise DataError(f"{metrics_path}: no per-structure Dice rows to plot")
        thresholds, fractions = cumulative_dice_curve(per_structure)
        ax.plot(thresholds, fractions, label=label)
        np.savetxt(out / f"cumulative_dice_{label.replace(' ', '_')}.txt",
                   np.column_stack([thresholds, fractions]), fmt="%.6f",
                   header="threshold fraction")
        mean_dices.append(float(np.mean(by_metric.get("dice_mean", per_structure))))
    ax.set_xlabel("Dice threshold")
    ax.set_ylabel("fraction of structures >= threshold")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    curve_path = out / f"cumulative_dice.{args.format}"
    fig.savefig(curve_path)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(mean_dices)), mean_dices, marker="o")
    ax.set_xticks(range(len(mean_dices)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("mean Dice")
    fig.tight_layout()
    fig.savefig(out / f"mean_dice.{args.format}")
    plt.close(fig)
    print(f"wrote plots to {out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "pseudo-labels": cmd_pseudo_labels,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1  # argparse uses 2 for usage errors
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli())
