"""Pseudo-label refinement and the test-time inference path.

Three stages sharpen a raw optimizer field: forward-backward consistency
(mutual adjustment of the two directions), a second warp (re-running feature
matching on the once-warped moving image and composing the residual), and
per-pair instance optimization of the field against the stride-4 feature
head with Adam under a diffusion penalty. The whole pipeline runs without
gradient tracking and is deterministic given its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .convex import CoupledConvexConfig, coupled_convex
from .correlation import correlate
from .errors import DivergenceError, GridError
from .features import FeatureExtractor, FeatureMap, extract
from .grid import (
    DisplacementField,
    Volume,
    compose_fields,
    node_grid,
    resample_field,
    sample_values,
    upsample_field,
    warp_volume,
)


@dataclass(frozen=True)
class RefinementConfig:
    fb_iterations: int = 5
    instance_iterations: int = 50
    instance_step: float = 0.2     # Adam step size, grid units
    reg_weight: float = 1.5        # diffusion weight
    enable_second_warp: bool = True
    enable_instance_opt: bool = True

    def __post_init__(self):
        if self.fb_iterations < 0 or self.instance_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.reg_weight < 0:
            raise ValueError("regularization weight must be >= 0")
        if self.instance_step <= 0:
            raise ValueError("instance step must be positive")

    @property
    def all_disabled(self) -> bool:
        return (self.fb_iterations == 0 and not self.enable_second_warp
                and not self.enable_instance_opt)


def forward_backward_consistency(fwd: DisplacementField, bwd: DisplacementField,
                                 iterations: int) -> tuple[DisplacementField, DisplacementField]:
    """Mutually adjust a forward/backward field pair toward inverse consistency.

    Each iteration applies fwd <- (fwd - bwd o fwd) / 2 followed by
    bwd <- (bwd - fwd o bwd) / 2 with the already-updated fwd, where
    (b o a)(x) = b(x + a(x)) is sampled trilinearly. Exact inverse pairs are
    fixed points.
    """
    if fwd.shape != bwd.shape or fwd.grid_scale != bwd.grid_scale:
        raise GridError(f"forward/backward grids differ: {fwd.shape}@{fwd.grid_scale} "
                        f"vs {bwd.shape}@{bwd.grid_scale}")
    f, b = fwd.data, bwd.data
    base = node_grid(fwd.shape, dtype=f.dtype, device=f.device)
    for _ in range(iterations):
        f = 0.5 * (f - sample_values(b, base + f))
        b = 0.5 * (b - sample_values(f, base + b))
    return (DisplacementField(f, fwd.grid_scale), DisplacementField(b, bwd.grid_scale))


def inverse_consistency_residual(fwd: DisplacementField, bwd: DisplacementField) -> float:
    """Mean norm of fwd + bwd o fwd (zero for perfectly inverse fields)."""
    base = node_grid(fwd.shape, dtype=fwd.data.dtype)
    residual = fwd.data + sample_values(bwd.data, base + fwd.data)
    return float(residual.square().sum(dim=0).sqrt().mean())


def _hard(convex_cfg: CoupledConvexConfig) -> CoupledConvexConfig:
    return convex_cfg if convex_cfg.hard_mode else replace(convex_cfg, hard_mode=True)


def _matched_field(feat_fixed: FeatureMap, feat_moving: FeatureMap,
                   convex_cfg: CoupledConvexConfig, fb_iterations: int) -> DisplacementField:
    """Hard-mode optimizer run with optional forward-backward consistency."""
    cfg = _hard(convex_cfg)
    forward = coupled_convex(correlate(feat_fixed, feat_moving), cfg)
    if fb_iterations > 0:
        backward = coupled_convex(correlate(feat_moving, feat_fixed), cfg)
        forward, _ = forward_backward_consistency(forward, backward, fb_iterations)
    return forward


def instance_loss(phi: torch.Tensor, deep_fixed: torch.Tensor, deep_moving: torch.Tensor,
                  base: torch.Tensor, reg_weight: float) -> torch.Tensor:
    """Feature dissimilarity under phi plus diffusion penalty (forward diffs)."""
    warped = sample_values(deep_moving, base + phi)
    data_term = (deep_fixed - warped).square().sum(dim=0).mean()
    nodes = phi[0].numel()
    reg = phi.new_zeros(())
    for ax in (1, 2, 3):
        if phi.shape[ax] > 1:
            reg = reg + torch.diff(phi, dim=ax).square().sum()
    return data_term + reg_weight * reg / nodes


def instance_optimize(phi_init: DisplacementField, deep_fixed: FeatureMap,
                      deep_moving: FeatureMap, cfg: RefinementConfig) -> DisplacementField:
    """Adam fine-tuning of the field against the stride-4 feature head.

    The loss at the final iterate must not exceed the starting loss; a
    violation aborts with diagnostics rather than returning a worse field.
    """
    if deep_fixed.shape != deep_moving.shape or deep_fixed.stride != deep_moving.stride:
        raise GridError("deep feature grids differ")
    if phi_init.shape != deep_fixed.shape:
        raise GridError(f"field grid {phi_init.shape} does not match deep feature "
                        f"grid {deep_fixed.shape}")
    if cfg.instance_iterations == 0:
        return phi_init
    fixed = deep_fixed.data.detach()
    moving = deep_moving.data.detach()
    base = node_grid(phi_init.shape, dtype=fixed.dtype, device=fixed.device)
    with torch.enable_grad():
        phi = phi_init.data.detach().clone().requires_grad_(True)
        optimizer = torch.optim.Adam([phi], lr=cfg.instance_step)
        initial = None
        for _ in range(cfg.instance_iterations):
            optimizer.zero_grad()
            loss = instance_loss(phi, fixed, moving, base, cfg.reg_weight)
            if initial is None:
                initial = float(loss.detach())
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            final = float(instance_loss(phi, fixed, moving, base, cfg.reg_weight))
    if not (final <= initial + 1e-12):
        raise DivergenceError(f"instance optimization increased its loss: "
                              f"{initial:.6g} -> {final:.6g}")
    return DisplacementField(phi.detach(), phi_init.grid_scale)


def second_warp_pass(fixed: Volume, moving: Volume, phi1: DisplacementField,
                     state: FeatureExtractor, cfg: RefinementConfig,
                     convex_cfg: CoupledConvexConfig | None = None) -> DisplacementField:
    """Warp the moving image by phi1, re-run matching, compose the residual.

    Returns phi with phi(x) = phi2(x) + phi1(x + phi2(x)) on phi1's grid.
    """
    convex_cfg = convex_cfg or CoupledConvexConfig(hard_mode=True)
    phi1_full = upsample_field(phi1, fixed.shape)
    rewarped = warp_volume(moving, phi1_full)
    feat_fixed, feat_rewarped, _, _ = extract(state, fixed, rewarped)
    phi2 = _matched_field(feat_fixed, feat_rewarped, convex_cfg, cfg.fb_iterations)
    return compose_fields(phi1, phi2)


def register_pair(fixed: Volume, moving: Volume, state: FeatureExtractor,
                  cfg: RefinementConfig,
                  convex_cfg: CoupledConvexConfig | None = None) -> DisplacementField:
    """Test-time registration: hard-mode optimizer prediction plus refinement."""
    convex_cfg = convex_cfg or CoupledConvexConfig(hard_mode=True)
    with torch.no_grad():
        feat_fixed, feat_moving, _, _ = extract(state, fixed, moving)
        phi_raw = coupled_convex(correlate(feat_fixed, feat_moving), _hard(convex_cfg))
    return refine(fixed, moving, phi_raw, state, cfg, convex_cfg)


def refine(fixed: Volume, moving: Volume, phi_raw: DisplacementField,
           state: FeatureExtractor, cfg: RefinementConfig,
           convex_cfg: CoupledConvexConfig | None = None) -> DisplacementField:
    """Full refinement pipeline; also the test-time path.

    consistency -> second warp -> instance optimization -> dense field.
    Runs in evaluation mode without gradient tracking; with every stage
    disabled this is just the upsampled input field.
    """
    convex_cfg = convex_cfg or CoupledConvexConfig(hard_mode=True)
    with torch.no_grad():
        feat_fixed, feat_moving, deep_fixed, deep_moving = extract(state, fixed, moving)
        if phi_raw.shape != feat_fixed.shape:
            raise GridError(f"raw field grid {phi_raw.shape} does not match the "
                            f"feature grid {feat_fixed.shape}")
        phi = phi_raw
        if cfg.fb_iterations > 0:
            backward = coupled_convex(correlate(feat_moving, feat_fixed), _hard(convex_cfg))
            phi, _ = forward_backward_consistency(phi, backward, cfg.fb_iterations)
        if cfg.enable_second_warp:
            phi = second_warp_pass(fixed, moving, phi, state, cfg, convex_cfg)
        if cfg.enable_instance_opt:
            phi = resample_field(phi, deep_fixed.shape, deep_fixed.stride)
            phi = instance_optimize(phi, deep_fixed, deep_moving, cfg)
        return upsample_field(phi, fixed.shape)
