"""Discrete matching costs between fixed and moving feature maps.

For every coarse voxel the cost over a 5x5x5 displacement window (offsets
{-2..2}^3 in feature-grid units, 125 candidates) is the sum of squared
channel differences; lower is better. Out-of-range lookups clamp to the
border. Candidates are enumerated centre-outward (by squared norm, then
lexicographically): downstream hard argmins break ties by lowest index, so
exact ties resolve to the smallest displacement. Border clamping makes such
ties routine (an edge cell matches itself under every outward offset).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import GridError
from .features import FeatureMap

WINDOW_RADIUS = 2
NUM_CANDIDATES = (2 * WINDOW_RADIUS + 1) ** 3  # 125


def candidate_order() -> list[tuple[int, int, int]]:
    """All window offsets, centre-outward: by squared norm, then (dz, dy, dx)."""
    r = WINDOW_RADIUS
    rows = itertools.product(range(-r, r + 1), repeat=3)
    return sorted(rows, key=lambda d: (d[0] ** 2 + d[1] ** 2 + d[2] ** 2, d))


def displacement_offsets(dtype=torch.float32, device=None) -> torch.Tensor:
    """(125, 3) candidate offsets in canonical (centre-outward) order."""
    return torch.tensor(candidate_order(), dtype=dtype, device=device)


@dataclass(frozen=True)
class CostVolume:
    """(d, h, w, 125) dissimilarities over the displacement window."""

    data: torch.Tensor
    stride: int = 8          # feature-grid stride relative to the full volume
    provenance: str = ""     # which feature state produced it

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != NUM_CANDIDATES:
            raise GridError(f"cost volume must be (d, h, w, {NUM_CANDIDATES}), "
                            f"got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise GridError("cost volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])


def correlate(feat_fixed: FeatureMap, feat_moving: FeatureMap,
              provenance: str = "") -> CostVolume:
    """SSD cost volume between two same-grid feature maps (differentiable)."""
    if feat_fixed.shape != feat_moving.shape or feat_fixed.stride != feat_moving.stride:
        raise GridError(f"feature grids differ: {feat_fixed.shape}@{feat_fixed.stride} vs "
                        f"{feat_moving.shape}@{feat_moving.stride}")
    fixed = feat_fixed.data
    r = WINDOW_RADIUS
    padded = F.pad(feat_moving.data.unsqueeze(0), (r, r, r, r, r, r),
                   mode="replicate").squeeze(0)
    d, h, w = feat_fixed.shape
    slices = []
    for dz, dy, dx in candidate_order():
        shifted = padded[:, r + dz:r + dz + d, r + dy:r + dy + h, r + dx:r + dx + w]
        slices.append(((fixed - shifted) ** 2).sum(dim=0))
    return CostVolume(torch.stack(slices, dim=-1), feat_fixed.stride, provenance)
