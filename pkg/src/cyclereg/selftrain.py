"""Cyclical self-training: pseudo-label generation, TRE-supervised feature
training with asymmetric streams, difficulty-weighted sampling, and the stage
loop with learning-rate warm restarts.

The label stream runs the frozen network in evaluation mode through the hard
optimizer plus refinement; the learning stream trains against those labels
through the differentiable soft read-out, with independently augmented input
pairs and the stored label carried into the augmented frame by the exact
affine composition formula. Labels regenerate once per stage.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np
import torch

from .convex import CoupledConvexConfig, coupled_convex
from .correlation import correlate
from .errors import DataError, DivergenceError, GridError
from .features import (
    FeatureExtractor,
    FeatureMap,
    extract,
    extract_batch,
    init_state,
    save_checkpoint,
)
from .grid import (
    AffineTransform,
    DisplacementField,
    apply_affine,
    resample_field,
    transform_field_for_affine_pair,
    upsample_field,
)
from .io import TrainingSet, load_field, read_json, save_field, write_json
from .refine import RefinementConfig, refine
from .seeding import numpy_rng

__all__ = [
    "AugmentConfig", "TrainingSchedule", "SelfTrainingConfig", "PseudoLabelStore",
    "tre_loss", "difficulty_score", "sampling_weights", "random_affine",
    "generate_pseudo_labels", "train_stage", "run_self_training", "cosine_lr",
]


@dataclass(frozen=True)
class TrainingSchedule:
    stages: int = 8
    iterations_per_stage: int = 1000
    batch_size: int = 2
    lr_max: float = 1e-3
    lr_min: float = 1e-5

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("need at least one stage")
        if self.iterations_per_stage < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch size must be >= 1")
        if not (self.lr_max > self.lr_min > 0):
            raise ValueError("need lr_max > lr_min > 0")


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    max_rotation_deg: float = 10.0
    max_scale: float = 0.10
    max_translation: float = 5.0  # voxels


@dataclass(frozen=True)
class SelfTrainingConfig:
    convex: CoupledConvexConfig = dc_field(default_factory=CoupledConvexConfig)
    refine: RefinementConfig = dc_field(default_factory=RefinementConfig)
    augment: AugmentConfig = dc_field(default_factory=AugmentConfig)
    refine_labels: bool = True  # ablation knob: raw optimizer output as labels when off
    seed: int = 0


def cosine_lr(iteration: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from lr_max (first iteration) to lr_min (last iteration)."""
    if total <= 1:
        return lr_max
    t = iteration / (total - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t))


def tre_loss(pred: DisplacementField, pseudo: DisplacementField, spacing) -> torch.Tensor:
    """Mean per-node Euclidean error in mm; differentiable w.r.t. ``pred``."""
    if pred.shape != pseudo.shape or pred.grid_scale != pseudo.grid_scale:
        raise GridError(f"field grids differ: {pred.shape}@{pred.grid_scale} vs "
                        f"{pseudo.shape}@{pseudo.grid_scale}")
    sp = torch.as_tensor(spacing, dtype=pred.data.dtype,
                         device=pred.data.device).view(3, 1, 1, 1)
    diff = (pred.data - pseudo.data) * (pred.grid_scale * sp)
    return diff.square().sum(dim=0).sqrt().mean()


def difficulty_score(phi_net: DisplacementField, phi_refined: DisplacementField,
                     spacing) -> float:
    """Mean discrepancy in mm between raw and refined fields (no gradients)."""
    with torch.no_grad():
        return float(tre_loss(phi_net, phi_refined, spacing))


def sampling_weights(difficulties) -> np.ndarray:
    """Normalized batch-sampling weights; easier pairs sample more often.

    Pairs are ranked by difficulty (ties broken by index); ranks map linearly
    onto sigmoid arguments from +5 (easiest) to -5 (hardest).
    """
    diffs = np.asarray(list(difficulties), dtype=np.float64)
    n = diffs.size
    if n == 0:
        raise ValueError("need at least one difficulty")
    order = np.argsort(diffs, kind="stable")
    scores = np.linspace(5.0, -5.0, n)
    arguments = np.empty(n)
    arguments[order] = scores
    weights = 1.0 / (1.0 + np.exp(-arguments))
    return weights / weights.sum()


def random_affine(rng: np.random.Generator, shape, cfg: AugmentConfig) -> AffineTransform:
    """Random rotation/scale about the volume centre plus a translation."""
    if not cfg.enabled:
        return AffineTransform.identity()
    angles = np.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, size=3))
    mats = []
    for axis, ang in enumerate(angles):
        c, s = math.cos(ang), math.sin(ang)
        m = np.eye(3)
        i, j = [a for a in range(3) if a != axis]
        m[i, i] = c
        m[i, j] = -s
        m[j, i] = s
        m[j, j] = c
        mats.append(m)
    linear = mats[0] @ mats[1] @ mats[2]
    linear = linear @ np.diag(rng.uniform(1 - cfg.max_scale, 1 + cfg.max_scale, size=3))
    translation = rng.uniform(-cfg.max_translation, cfg.max_translation, size=3)
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2
    offset = center - linear @ center + translation
    return AffineTransform(torch.as_tensor(linear, dtype=torch.float32),
                           torch.as_tensor(offset, dtype=torch.float32))


# ---------------------------------------------------------------------------
# pseudo-label store: one directory per stage, versioned, append-only
# ---------------------------------------------------------------------------

@dataclass
class StoreEntry:
    pair_id: str
    refined: DisplacementField   # stride-8 grid
    raw: DisplacementField       # stride-8 grid, pre-refinement optimizer output
    difficulty: float
    stage: int


class PseudoLabelStore:
    """Directory of per-pair refined fields with difficulties, keyed by stage."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._cache: dict[tuple[int, str], StoreEntry] = {}

    def stage_dir(self, stage: int) -> Path:
        return self.root / f"stage_{stage:02d}"

    def has_stage(self, stage: int) -> bool:
        return (self.stage_dir(stage) / "manifest.json").exists()

    def stages(self) -> list[int]:
        out = []
        for child in sorted(self.root.glob("stage_*")):
            if (child / "manifest.json").exists():
                out.append(int(child.name.split("_")[1]))
        return out

    def save_entry(self, stage: int, pair_id: str, refined: DisplacementField,
                   raw: DisplacementField, difficulty: float) -> dict:
        directory = self.stage_dir(stage)
        try:
            save_field(directory / f"{pair_id}.refined.rgf", refined)
            save_field(directory / f"{pair_id}.raw.rgf", raw)
        except OSError as exc:
            raise DataError(f"pair {pair_id}: failed to store pseudo label: {exc}") from exc
        from .io import file_sha256
        return {"pair_id": pair_id, "difficulty": float(difficulty),
                "refined_sha256": file_sha256(directory / f"{pair_id}.refined.rgf"),
                "raw_sha256": file_sha256(directory / f"{pair_id}.raw.rgf")}

    def finalize_stage(self, stage: int, entries: list[dict], flags: dict) -> None:
        write_json(self.stage_dir(stage) / "manifest.json",
                   {"stage": stage, "entries": entries, "flags": flags})

    def manifest(self, stage: int) -> dict:
        if not self.has_stage(stage):
            raise DataError(f"pseudo-label store has no complete stage {stage}")
        return read_json(self.stage_dir(stage) / "manifest.json")

    def difficulties(self, stage: int) -> list[float]:
        return [entry["difficulty"] for entry in self.manifest(stage)["entries"]]

    def pair_ids(self, stage: int) -> list[str]:
        return [entry["pair_id"] for entry in self.manifest(stage)["entries"]]

    def load_entry(self, stage: int, pair_id: str) -> StoreEntry:
        key = (stage, pair_id)
        if key not in self._cache:
            directory = self.stage_dir(stage)
            try:
                refined = load_field(directory / f"{pair_id}.refined.rgf")
                raw = load_field(directory / f"{pair_id}.raw.rgf")
            except DataError as exc:
                raise DataError(f"pair {pair_id}: {exc}") from exc
            lookup = {e["pair_id"]: e["difficulty"] for e in self.manifest(stage)["entries"]}
            if pair_id not in lookup:
                raise DataError(f"pair {pair_id}: not in stage {stage} manifest")
            self._cache[key] = StoreEntry(pair_id, refined, raw, lookup[pair_id], stage)
        return self._cache[key]


def generate_pseudo_labels(state: FeatureExtractor, data: TrainingSet,
                           cfg: SelfTrainingConfig, store: PseudoLabelStore,
                           stage: int) -> PseudoLabelStore:
    """One label-generation pass over all pairs with a frozen state.

    Per pair: hard-mode optimizer field, refinement (unless disabled), both
    stored on the stride-8 grid together with the raw/refined discrepancy as
    the difficulty score. Deterministic given (state, data, cfg).
    """
    hard_cfg = replace(cfg.convex, hard_mode=True)
    spacing = data.spacing or (1.0, 1.0, 1.0)
    entries = []
    with torch.no_grad():
        for index, pair in enumerate(data.pairs):
            fixed, moving = data.load_pair(index)
            feat_f, feat_m, _, _ = extract(state, fixed, moving)
            phi_net = coupled_convex(correlate(feat_f, feat_m), hard_cfg)
            if cfg.refine_labels:
                phi_full = refine(fixed, moving, phi_net, state, cfg.refine, cfg.convex)
            else:
                phi_full = upsample_field(phi_net, fixed.shape)
            phi_hat = resample_field(phi_full, phi_net.shape, phi_net.grid_scale)
            difficulty = difficulty_score(phi_net, phi_hat, spacing)
            entries.append(store.save_entry(stage, pair.pair_id, phi_hat, phi_net,
                                            difficulty))
    store.finalize_stage(stage, entries, flags={
        "labels_refined": bool(cfg.refine_labels),
        "generator_seed": state.seed,
        "generator_stage": state.stage,
    })
    return store


def _soft_prediction(feat_fixed: torch.Tensor, feat_moving: torch.Tensor,
                     soft_cfg: CoupledConvexConfig, stride: int) -> DisplacementField:
    cost = correlate(FeatureMap(feat_fixed, stride), FeatureMap(feat_moving, stride))
    return coupled_convex(cost, soft_cfg)


def train_stage(stage: int, start_state: FeatureExtractor, store: PseudoLabelStore,
                data: TrainingSet, schedule: TrainingSchedule,
                cfg: SelfTrainingConfig) -> tuple[FeatureExtractor, dict]:
    """One TRE-supervised stage against the previous stage's labels.

    The incoming state is copied, not mutated. Within the stage the learning
    rate follows a cosine from lr_max down to lr_min (warm restart at every
    stage by construction). Aborts with diagnostics if the loss goes
    non-finite.
    """
    prev_stage = stage - 1
    if not store.has_stage(prev_stage):
        raise DataError(f"stage {stage} needs pseudo labels of stage {prev_stage}")
    state = copy.deepcopy(start_state)
    state.stage = stage
    optimizer = torch.optim.Adam(state.parameters(), lr=schedule.lr_max)
    weights = sampling_weights(store.difficulties(prev_stage))
    pair_ids = store.pair_ids(prev_stage)
    sample_rng = numpy_rng(cfg.seed, "sampling", stage)
    augment_rng = numpy_rng(cfg.seed, "augment", stage)
    soft_cfg = replace(cfg.convex, hard_mode=False)
    spacing = data.spacing or (1.0, 1.0, 1.0)
    n = len(data)
    losses: list[float] = []
    lrs: list[float] = []
    started = time.time()

    for iteration in range(schedule.iterations_per_stage):
        lr = cosine_lr(iteration, schedule.iterations_per_stage,
                       schedule.lr_max, schedule.lr_min)
        for group in optimizer.param_groups:
            group["lr"] = lr
        chosen = sample_rng.choice(n, size=schedule.batch_size, p=weights, replace=True)
        fixed_batch, moving_batch, targets = [], [], []
        for index in chosen:
            fixed, moving = data.load_pair(int(index))
            label = store.load_entry(prev_stage, pair_ids[int(index)]).refined
            if cfg.augment.enabled:
                aff_fixed = random_affine(augment_rng, fixed.shape, cfg.augment)
                aff_moving = random_affine(augment_rng, moving.shape, cfg.augment)
                fixed = apply_affine(fixed, aff_fixed)
                moving = apply_affine(moving, aff_moving)
                dense = upsample_field(label, fixed.shape)
                carried = transform_field_for_affine_pair(dense, aff_fixed, aff_moving)
                target = resample_field(carried, label.shape, label.grid_scale)
            else:
                target = label
            fixed_batch.append(fixed.data.unsqueeze(0).unsqueeze(0))
            moving_batch.append(moving.data.unsqueeze(0).unsqueeze(0))
            targets.append(target)

        try:
            feat_f, feat_m = extract_batch(state, torch.cat(fixed_batch),
                                           torch.cat(moving_batch), train_mode=True)
            loss = None
            for j, target in enumerate(targets):
                pred = _soft_prediction(feat_f[j], feat_m[j], soft_cfg, target.grid_scale)
                pair_loss = tre_loss(pred, target, spacing)
                loss = pair_loss if loss is None else loss + pair_loss
            loss = loss / len(targets)
        except GridError as exc:  # non-finite features surface as grid errors
            raise DivergenceError(f"stage {stage}, iteration {iteration} "
                                  f"(lr={lr:.2e}): {exc}") from exc
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at stage {stage}, "
                                  f"iteration {iteration} (lr={lr:.2e})")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
        lrs.append(lr)

    report = {
        "stage": stage,
        "iterations": schedule.iterations_per_stage,
        "batch_size": schedule.batch_size,
        "lr_first": lrs[0],
        "lr_last": lrs[-1],
        "loss_first": losses[0],
        "loss_last": losses[-1],
        "loss_mean_final_tenth": float(np.mean(losses[-max(1, len(losses) // 10):])),
        "labels_refined": bool(store.manifest(prev_stage)["flags"]["labels_refined"]),
        "learning_stream_refined": False,
        "duration_s": time.time() - started,
    }
    return state, report


def run_self_training(data: TrainingSet, schedule: TrainingSchedule,
                      cfg: SelfTrainingConfig, seed: int, out_dir,
                      resume: bool = False) -> tuple[FeatureExtractor, dict]:
    """Full cyclical loop: label generation and training, T times.

    Stage 0 labels come from a randomly initialized network; the first
    learning stage starts from a different random initialization; later
    stages continue from the previous stage's weights with a learning-rate
    warm restart. Checkpoints and label-store versions land in ``out_dir``
    and the loop resumes from any completed stage when ``resume`` is set.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = PseudoLabelStore(out / "labels")
    report_path = out / "report.json"
    report = read_json(report_path) if (resume and report_path.exists()) else {
        "seed": seed, "stages": [], "schedule": {
            "stages": schedule.stages,
            "iterations_per_stage": schedule.iterations_per_stage,
            "batch_size": schedule.batch_size,
            "lr_max": schedule.lr_max, "lr_min": schedule.lr_min},
    }

    label_state = init_state(seed)
    if not (resume and store.has_stage(0)):
        generate_pseudo_labels(label_state, data, cfg, store, stage=0)

    state = init_state(seed + 1)  # asymmetric restart for the first learning stage
    for stage in range(1, schedule.stages + 1):
        ckpt = out / "checkpoints" / f"stage_{stage:02d}.ckpt"
        if resume and ckpt.exists() and store.has_stage(stage):
            from .features import load_checkpoint
            state = load_checkpoint(ckpt)
            continue
        state, stage_report = train_stage(stage, state, store, data, schedule, cfg)
        save_checkpoint(ckpt, state)
        generate_pseudo_labels(state, data, cfg, store, stage=stage)
        stage_report["mean_difficulty"] = float(np.mean(store.difficulties(stage)))
        stage_report["checkpoint"] = str(ckpt)
        report["stages"] = [s for s in report["stages"] if s["stage"] != stage]
        report["stages"].append(stage_report)
        write_json(report_path, report)
    return state, report
