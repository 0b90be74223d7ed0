"""Trainable feature extractor: paired 3D volumes to 16-channel descriptor
grids at stride 8 (matching head) and stride 4 (fine head for per-pair
field optimization).

Architecture: six 3x3x3 convolutions (32, 32, 64, 64, 128, 128 channels,
stride 2 on every second one), each followed by BatchNorm and ReLU, applied
with shared weights to both volumes. Two 1x1x1 linear projections map the
conv4 output (stride 4) and the conv6 output (stride 8) to 16 channels.
All weights use fan-in-scaled Gaussian initialization (ReLU gain).

Descriptors are L2-normalized per voxel and rescaled by a fixed gain, so
squared-difference matching costs are bounded by 4 * FEATURE_SCALE**2 at
every training stage. Without this the feature magnitude (and with it the
cost scale) drifts unboundedly under TRE training, silently re-weighting
the downstream optimizer's coupling schedule and the instance-optimization
regularizer between stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import GridError
from .grid import Volume
from .io import load_named_tensors, save_named_tensors
from .seeding import substream_seed

# (in_channels, out_channels, stride) for the six conv layers
CHANNEL_PLAN = ((1, 32, 1), (32, 32, 2), (32, 64, 1), (64, 64, 2), (64, 128, 1), (128, 128, 2))
FEATURE_CHANNELS = 16
FEATURE_SCALE = 2.0  # length of each voxel's descriptor after normalization
DOWNSAMPLE = 8


def _unit_normalize(feat: torch.Tensor) -> torch.Tensor:
    """Scale each voxel's channel vector to length FEATURE_SCALE (eps-safe)."""
    norm = feat.square().sum(dim=1, keepdim=True).add(1e-12).sqrt()
    return feat * (FEATURE_SCALE / norm)


@dataclass(frozen=True)
class FeatureMap:
    """Descriptor grid (16, D/s, H/s, W/s) at stride s."""

    data: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != FEATURE_CHANNELS:
            raise GridError(f"feature map must be ({FEATURE_CHANNELS}, d, h, w), "
                            f"got {tuple(self.data.shape)}")
        if self.stride not in (4, 8):
            raise GridError(f"feature stride must be 4 or 8, got {self.stride}")
        if not torch.isfinite(self.data).all():
            raise GridError("feature map contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


class FeatureExtractor(nn.Module):
    """Siamese 3D CNN; one instance is the learnable state theta_g."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = int(seed)
        self.stage = 0
        convs, norms = [], []
        for cin, cout, stride in CHANNEL_PLAN:
            convs.append(nn.Conv3d(cin, cout, kernel_size=3, stride=stride, padding=1))
            norms.append(nn.BatchNorm3d(cout))
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.proj_mid = nn.Conv3d(CHANNEL_PLAN[3][1], FEATURE_CHANNELS, kernel_size=1)
        self.proj_out = nn.Conv3d(CHANNEL_PLAN[5][1], FEATURE_CHANNELS, kernel_size=1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Deterministic fan-in-scaled Gaussian init driven by the seed."""
        gen = torch.Generator().manual_seed(substream_seed(self.seed, "feature-init"))
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * 27
                conv.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                conv.bias.zero_()
            for norm in self.norms:
                norm.weight.fill_(1.0)
                norm.bias.zero_()
                norm.running_mean.zero_()
                norm.running_var.fill_(1.0)
                norm.num_batches_tracked.zero_()
            for proj in (self.proj_mid, self.proj_out):
                fan_in = proj.in_channels
                proj.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                proj.bias.zero_()

    def forward(self, volumes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run a (N, 1, D, H, W) batch; returns stride-8 and stride-4 features."""
        x = volumes
        mid = None
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = torch.relu(norm(conv(x)))
            if i == 3:
                mid = x
        return _unit_normalize(self.proj_out(x)), _unit_normalize(self.proj_mid(mid))


def init_state(seed: int) -> FeatureExtractor:
    """Fresh deterministic state; same seed gives bitwise-identical parameters."""
    return FeatureExtractor(seed)


def required_padding(shape) -> tuple[int, int, int]:
    return tuple((-int(n)) % DOWNSAMPLE for n in shape)


def _check_divisible(shape) -> None:
    pad = required_padding(shape)
    if any(pad):
        target = tuple(int(n) + p for n, p in zip(shape, pad))
        raise GridError(f"volume shape {tuple(shape)} is not divisible by {DOWNSAMPLE}; "
                        f"pad to {target} (padding {pad})")


def _as_batch(vol: Volume | torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    data = vol.data if isinstance(vol, Volume) else vol
    return data.to(dtype).unsqueeze(0).unsqueeze(0)


def extract(state: FeatureExtractor, fixed: Volume, moving: Volume,
            train_mode: bool = False):
    """Siamese forward pass of one pair.

    Returns ``(feat_fixed@8, feat_moving@8, deep_fixed@4, deep_moving@4)``.
    The pass is differentiable with respect to the state; wrap in
    ``torch.no_grad()`` for inference. ``train_mode`` switches BatchNorm to
    batch statistics (and updates running statistics).
    """
    if (isinstance(fixed, Volume) and isinstance(moving, Volume)
            and fixed.shape != moving.shape):
        raise GridError(f"fixed/moving shapes differ: {fixed.shape} vs {moving.shape}")
    dtype = next(state.parameters()).dtype
    batch = torch.cat([_as_batch(fixed, dtype), _as_batch(moving, dtype)], dim=0)
    _check_divisible(batch.shape[2:])
    was_training = state.training
    state.train(train_mode)
    try:
        feat8, feat4 = state(batch)
    finally:
        state.train(was_training)
    return (FeatureMap(feat8[0], 8), FeatureMap(feat8[1], 8),
            FeatureMap(feat4[0], 4), FeatureMap(feat4[1], 4))


def extract_batch(state: FeatureExtractor, fixed_batch: torch.Tensor,
                  moving_batch: torch.Tensor, train_mode: bool = True):
    """Joint forward of B pairs, (B, 1, D, H, W) each; BatchNorm statistics
    pool over all 2B volumes. Returns stride-8 features split back into
    fixed and moving halves."""
    _check_divisible(fixed_batch.shape[2:])
    b = fixed_batch.shape[0]
    was_training = state.training
    state.train(train_mode)
    try:
        feat8, _ = state(torch.cat([fixed_batch, moving_batch], dim=0))
    finally:
        state.train(was_training)
    return feat8[:b], feat8[b:]


def parameter_count(state: FeatureExtractor) -> int:
    return sum(p.numel() for p in state.parameters())


def expected_parameter_count() -> int:
    total = 0
    for cin, cout, _ in CHANNEL_PLAN:
        total += 27 * cin * cout + cout  # conv weight + bias
        total += 2 * cout                # BatchNorm affine
    total += CHANNEL_PLAN[3][1] * FEATURE_CHANNELS + FEATURE_CHANNELS
    total += CHANNEL_PLAN[5][1] * FEATURE_CHANNELS + FEATURE_CHANNELS
    return total


def save_checkpoint(path, state: FeatureExtractor) -> None:
    """Persist all parameters and buffers plus the seed and stage index."""
    tensors = {name: tensor for name, tensor in state.state_dict().items()}
    save_named_tensors(path, tensors, {"seed": state.seed, "stage": state.stage})


def load_checkpoint(path) -> FeatureExtractor:
    tensors, meta = load_named_tensors(path)
    state = FeatureExtractor(int(meta["seed"]))
    state.stage = int(meta["stage"])
    state.load_state_dict(tensors, strict=True)
    return state
