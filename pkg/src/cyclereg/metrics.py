"""Evaluation metrics: Dice overlap, SDlogJ, landmark TRE, cumulative curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import GridError
from .grid import DisplacementField, LabelVolume, jacobian_determinant, sample_field

JACOBIAN_FLOOR = 1e-6  # folding voxels would otherwise send log J to -inf


@dataclass(frozen=True)
class LandmarkSet:
    """3D points in voxel coordinates of one volume, with its mm spacing."""

    points: np.ndarray  # (N, 3), z/y/x voxel coordinates
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GridError(f"landmarks must be (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise GridError("landmarks contain non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class DiceResult:
    per_class: dict[int, float]
    mean: float


def dice(warped: LabelVolume, fixed: LabelVolume, absent_scores_one: bool = False) -> DiceResult:
    """Per-class and mean Dice of two label maps sharing a class index space.

    Classes with zero voxels in both volumes are excluded from the mean by
    default (set ``absent_scores_one`` to score them 1.0 instead).
    """
    if warped.shape != fixed.shape:
        raise GridError(f"label shape mismatch: {warped.shape} vs {fixed.shape}")
    a = warped.data
    b = fixed.data
    n_classes = max(warped.num_classes, fixed.num_classes)
    per_class: dict[int, float] = {}
    scores = []
    for c in range(1, n_classes + 1):
        in_a = a == c
        in_b = b == c
        size_a = int(in_a.sum())
        size_b = int(in_b.sum())
        if size_a + size_b == 0:
            if absent_scores_one:
                per_class[c] = 1.0
                scores.append(1.0)
            continue
        inter = int((in_a & in_b).sum())
        score = 2.0 * inter / (size_a + size_b)
        per_class[c] = score
        scores.append(score)
    mean = float(np.mean(scores)) if scores else float("nan")
    return DiceResult(per_class, mean)


def sd_log_jacobian(field: DisplacementField) -> float:
    """Population standard deviation of log det(I + grad(phi)) over the grid."""
    det = jacobian_determinant(field)
    logs = torch.log(det.clamp(min=JACOBIAN_FLOOR))
    return float(logs.std(unbiased=False))


@dataclass(frozen=True)
class TREResult:
    mean: float
    std: float
    percentiles: dict[int, float]
    errors_mm: np.ndarray
    n_excluded: int


def target_registration_error(fixed_landmarks: LandmarkSet,
                              moving_landmarks: LandmarkSet,
                              field: DisplacementField) -> TREResult:
    """Landmark TRE in mm after mapping fixed points through the field.

    Each fixed point ``p`` maps to ``p + phi(p)`` (trilinear field sampling)
    and is compared against the paired moving point. Fixed points outside the
    field grid are excluded and counted.
    """
    if len(fixed_landmarks) != len(moving_landmarks):
        raise GridError("fixed and moving landmark lists must pair up 1:1")
    if field.grid_scale != 1:
        raise GridError("TRE needs a dense (grid_scale 1) field")
    pts = fixed_landmarks.points
    shape = np.asarray(field.shape, dtype=np.float64)
    inside = np.all((pts >= 0) & (pts <= shape - 1), axis=1)
    n_excluded = int((~inside).sum())
    pts_in = pts[inside]
    moving = moving_landmarks.points[inside]
    if pts_in.shape[0] == 0:
        return TREResult(float("nan"), float("nan"), {}, np.zeros(0), n_excluded)
    coords = torch.as_tensor(pts_in.T, dtype=field.data.dtype)
    disp = sample_field(field.data, coords).numpy().T  # (N, 3)
    mapped = pts_in + disp
    spacing = np.asarray(fixed_landmarks.spacing, dtype=np.float64)
    errors = np.linalg.norm((mapped - moving) * spacing, axis=1)
    percentiles = {p: float(np.percentile(errors, p)) for p in (25, 50, 75, 90, 95)}
    return TREResult(float(errors.mean()), float(errors.std()), percentiles,
                     errors, n_excluded)


def cumulative_dice_curve(values) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of entries with Dice >= t over the threshold grid 0, 0.01, ..., 1."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("cumulative curve needs at least one Dice value")
    if vals.min() < 0 or vals.max() > 1:
        raise ValueError("Dice values must lie in [0, 1]")
    thresholds = np.arange(101) / 100.0
    fractions = (vals[None, :] >= thresholds[:, None]).mean(axis=1)
    return thresholds, fractions


def mean_endpoint_error(pred: DisplacementField, reference: DisplacementField,
                        spacing=(1.0, 1.0, 1.0)) -> float:
    """Mean per-node Euclidean error in mm between two same-grid fields."""
    if pred.shape != reference.shape or pred.grid_scale != reference.grid_scale:
        raise GridError("endpoint error needs fields on the same grid")
    sp = torch.as_tensor(spacing, dtype=pred.data.dtype).view(3, 1, 1, 1)
    diff = (pred.data - reference.data) * pred.grid_scale * sp
    return float(diff.square().sum(dim=0).sqrt().mean())
