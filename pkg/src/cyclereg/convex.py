"""Coupled convex optimization: cost volume to smooth coarse displacement field.

The solver alternates per-voxel convex coupling steps against a smoothed
auxiliary field: with z initialized to the plain per-voxel argmin, iteration i
minimizes ``cost(x, d) + theta_i * ||d - z(x)||^2`` pointwise and re-smooths.
The read-out is either the hard argmin of the final coupled cost
(pseudo-label generation, inference) or a temperature soft-argmin over it
(training; differentiable with respect to the costs).

The schedule, smoother width, and temperature defaults are conventions of
this implementation (see README), exposed in the run configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .correlation import NUM_CANDIDATES, CostVolume, displacement_offsets
from .grid import DisplacementField


@dataclass(frozen=True)
class CoupledConvexConfig:
    coupling_schedule: tuple[float, ...] = (1.0, 3.0, 10.0)
    smoother_halfwidth: int = 1
    softmax_temperature: float = 15.0
    hard_mode: bool = False

    def __post_init__(self):
        sched = tuple(float(t) for t in self.coupling_schedule)
        if any(t <= 0 for t in sched):
            raise ValueError("coupling weights must be positive")
        if any(b <= a for a, b in zip(sched, sched[1:])):
            raise ValueError("coupling schedule must be strictly increasing")
        if self.softmax_temperature <= 0:
            raise ValueError("softmax temperature must be positive")
        if self.smoother_halfwidth < 0:
            raise ValueError("smoother half-width must be >= 0")
        object.__setattr__(self, "coupling_schedule", sched)


def first_argmin(values: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Argmin with ties broken by the lowest index, deterministically."""
    axis = dim if dim >= 0 else values.ndim + dim
    n = values.shape[axis]
    minima = values.min(dim=axis, keepdim=True).values
    view = [1] * values.ndim
    view[axis] = n
    arange = torch.arange(n, device=values.device).view(view).expand_as(values)
    candidates = torch.where(values == minima, arange, n)
    return candidates.min(dim=axis).values


def box_smooth(field: torch.Tensor, halfwidth: int = 1) -> torch.Tensor:
    """Box filter each component with replicate borders; (3, d, h, w) in/out."""
    if halfwidth == 0:
        return field
    k = 2 * halfwidth + 1
    padded = F.pad(field.unsqueeze(0), (halfwidth,) * 6, mode="replicate")
    return F.avg_pool3d(padded, kernel_size=k, stride=1).squeeze(0)


def soft_argmin(costs: torch.Tensor, temperature: float) -> torch.Tensor:
    """Displacement expectation under softmax(-beta * cost).

    ``costs`` is (..., 125); returns (3, ...). Gradients are defined
    everywhere (softmax is smooth).
    """
    if costs.shape[-1] != NUM_CANDIDATES:
        raise ValueError(f"expected a trailing candidate axis of {NUM_CANDIDATES}")
    offsets = displacement_offsets(costs.dtype, costs.device)  # (125, 3)
    weights = torch.softmax(-temperature * costs, dim=-1)
    out = weights @ offsets  # (..., 3)
    return out.movedim(-1, 0)


def _gather_offsets(indices: torch.Tensor, dtype, device) -> torch.Tensor:
    offsets = displacement_offsets(dtype, device)
    return offsets[indices].movedim(-1, 0)  # (3, d, h, w)


def coupled_convex(cost: CostVolume, cfg: CoupledConvexConfig) -> DisplacementField:
    """Solve the coupled convex problem for one cost volume.

    Hard mode returns the final iterate's argmin field; differentiable mode
    returns the soft-argmin of the final coupled cost (gradients w.r.t. the
    costs; the auxiliary field z is piecewise constant and carries none).
    Output components lie within the window radius.
    """
    data = cost.data
    offsets = displacement_offsets(data.dtype, data.device)  # (125, 3)
    indices = first_argmin(data, dim=-1)
    z = _gather_offsets(indices, data.dtype, data.device)
    coupled = data
    for theta in cfg.coupling_schedule:
        # squared distance of every candidate to the auxiliary field
        dist = (offsets.t().view(3, 1, 1, 1, -1) - z.unsqueeze(-1)).square().sum(dim=0)
        coupled = data + theta * dist
        indices = first_argmin(coupled, dim=-1)
        z = box_smooth(_gather_offsets(indices, data.dtype, data.device),
                       cfg.smoother_halfwidth)
    if cfg.hard_mode:
        out = _gather_offsets(indices, data.dtype, data.device)
    else:
        out = soft_argmin(coupled, cfg.softmax_temperature)
    return DisplacementField(out, cost.stride)
