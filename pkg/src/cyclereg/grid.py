"""Grid geometry: volumes, displacement fields, warping, and field algebra.

Conventions used throughout the package:

* Arrays are ordered ``(D, H, W)`` (axis 0 slowest); vector fields carry the
  component axis first, ``(3, d, h, w)``, with components in the same order.
* A displacement field maps fixed-grid coordinates to offsets into the moving
  image, in voxel units of its own grid. The physical displacement in mm is
  ``data * grid_scale * spacing``; mm conversion happens only in losses and
  metrics.
* Out-of-range samples clamp to the border (images and fields alike).
* Coarse grids are endpoint-aligned with fine grids: node ``i`` of a grid with
  ``n`` nodes sits at fine coordinate ``i * (n_fine - 1) / (n - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import GridError

Spacing = tuple[float, float, float]

ALLOWED_GRID_SCALES = (1, 2, 4, 8)


def _check_spacing(spacing) -> Spacing:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise GridError(f"spacing must be 3 positive values, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    """Scalar 3D image on a regular grid with per-axis voxel size in mm."""

    data: torch.Tensor  # (D, H, W), floating point
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise GridError(f"volume data must be 3D, got shape {tuple(self.data.shape)}")
        if not self.data.is_floating_point():
            raise GridError("volume data must be floating point")
        if not torch.isfinite(self.data).all():
            raise GridError("volume contains non-finite values")
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class LabelVolume:
    """Integer label map; label 0 is background."""

    data: torch.Tensor  # (D, H, W), integer
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise GridError(f"label data must be 3D, got shape {tuple(self.data.shape)}")
        if self.data.is_floating_point() or self.data.is_complex():
            raise GridError("label data must be integer")
        if self.data.numel() and int(self.data.min()) < 0:
            raise GridError("labels must be non-negative")
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def num_classes(self) -> int:
        return int(self.data.max()) if self.data.numel() else 0


@dataclass(frozen=True)
class DisplacementField:
    """3-vector field over a (possibly coarse) grid, in own-grid voxel units."""

    data: torch.Tensor  # (3, d, h, w), floating point
    grid_scale: int = 1

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise GridError(f"field data must be (3, d, h, w), got {tuple(self.data.shape)}")
        if not self.data.is_floating_point():
            raise GridError("field data must be floating point")
        if not torch.isfinite(self.data).all():
            raise GridError("field contains non-finite values")
        if self.grid_scale not in ALLOWED_GRID_SCALES:
            raise GridError(f"grid_scale must be one of {ALLOWED_GRID_SCALES}, got {self.grid_scale}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


@dataclass(frozen=True)
class AffineTransform:
    """Affine in voxel coordinates: output point x samples input at matrix @ x + offset."""

    matrix: torch.Tensor  # (3, 3)
    offset: torch.Tensor  # (3,)

    def __post_init__(self):
        if tuple(self.matrix.shape) != (3, 3) or tuple(self.offset.shape) != (3,):
            raise GridError("affine needs a (3, 3) matrix and a (3,) offset")
        det = torch.linalg.det(self.matrix.double())
        if not torch.isfinite(det) or abs(float(det)) <= 1e-8:
            raise GridError(f"affine matrix is singular (det={float(det):.3e})")

    @classmethod
    def identity(cls, dtype=torch.float32) -> "AffineTransform":
        return cls(torch.eye(3, dtype=dtype), torch.zeros(3, dtype=dtype))

    def inverse(self) -> "AffineTransform":
        inv = torch.linalg.inv(self.matrix.double())
        off = -inv @ self.offset.double()
        return AffineTransform(inv.to(self.matrix.dtype), off.to(self.offset.dtype))

    def apply_points(self, points: torch.Tensor) -> torch.Tensor:
        """Map points given as (3, ...) through matrix @ p + offset."""
        flat = points.reshape(3, -1)
        out = self.matrix.to(flat.dtype) @ flat + self.offset.to(flat.dtype).unsqueeze(1)
        return out.reshape(points.shape)


def node_grid(shape, dtype=torch.float32, device=None) -> torch.Tensor:
    """Integer node coordinates of a grid as a (3, D, H, W) float tensor."""
    axes = [torch.arange(int(n), dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)


def sample_values(data: torch.Tensor, coords: torch.Tensor, mode: str = "linear") -> torch.Tensor:
    """Sample channel-first data (C, D, H, W) at voxel coords (3, *out), clamp-to-edge.

    ``linear`` is trilinear and differentiable w.r.t. both arguments; exact at
    integer coordinates. ``nearest`` rounds coordinates (for label maps).
    """
    if data.ndim != 4:
        raise GridError(f"sample_values expects (C, D, H, W) data, got {tuple(data.shape)}")
    if coords.shape[0] != 3:
        raise GridError("coords must have a leading component axis of size 3")
    C = data.shape[0]
    D, H, W = data.shape[1:]
    out_shape = coords.shape[1:]
    flat = data.reshape(C, -1)

    cz = coords[0].clamp(0, D - 1)
    cy = coords[1].clamp(0, H - 1)
    cx = coords[2].clamp(0, W - 1)

    def gather(iz, iy, ix):
        idx = ((iz * H + iy) * W + ix).reshape(-1)
        return flat[:, idx].reshape(C, *out_shape)

    if mode == "nearest":
        return gather(cz.round().long(), cy.round().long(), cx.round().long())
    if mode != "linear":
        raise ValueError(f"unknown sampling mode {mode!r}")

    z0f, y0f, x0f = cz.floor(), cy.floor(), cx.floor()
    wz = (cz - z0f).to(data.dtype)
    wy = (cy - y0f).to(data.dtype)
    wx = (cx - x0f).to(data.dtype)
    z0, y0, x0 = z0f.long(), y0f.long(), x0f.long()
    z1 = (z0 + 1).clamp(max=D - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    x1 = (x0 + 1).clamp(max=W - 1)

    c00 = gather(z0, y0, x0) + wx * (gather(z0, y0, x1) - gather(z0, y0, x0))
    c01 = gather(z0, y1, x0) + wx * (gather(z0, y1, x1) - gather(z0, y1, x0))
    c10 = gather(z1, y0, x0) + wx * (gather(z1, y0, x1) - gather(z1, y0, x0))
    c11 = gather(z1, y1, x0) + wx * (gather(z1, y1, x1) - gather(z1, y1, x0))
    c0 = c00 + wy * (c01 - c00)
    c1 = c10 + wy * (c11 - c10)
    return c0 + wz * (c1 - c0)


def sample_field(field_data: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Trilinearly sample a (3, d, h, w) field at voxel coords (3, ...)."""
    return sample_values(field_data, coords, mode="linear")


def _integer_factor(target_shape, source_shape) -> int:
    factors = []
    for t, s in zip(target_shape, source_shape):
        if t % s != 0:
            raise GridError(f"target shape {tuple(target_shape)} is not an integer multiple "
                            f"of field shape {tuple(source_shape)}")
        factors.append(t // s)
    if len(set(factors)) != 1:
        raise GridError(f"per-axis upsampling factors differ: {factors}")
    return factors[0]


def resample_field(field: DisplacementField, target_shape, target_grid_scale: int) -> DisplacementField:
    """Resample a field onto another grid, preserving physical displacement.

    Nodes are endpoint-aligned; vector values are rescaled by the ratio of
    grid scales so that ``data * grid_scale`` is preserved.
    """
    target_shape = tuple(int(n) for n in target_shape)
    if target_grid_scale not in ALLOWED_GRID_SCALES:
        raise GridError(f"grid_scale must be one of {ALLOWED_GRID_SCALES}")
    src_shape = field.shape
    dtype = field.data.dtype
    if target_shape == src_shape and target_grid_scale == field.grid_scale:
        return field
    coords = node_grid(target_shape, dtype=dtype, device=field.data.device)
    for ax in range(3):
        src_n, tgt_n = src_shape[ax], target_shape[ax]
        ratio = (src_n - 1) / (tgt_n - 1) if tgt_n > 1 else 0.0
        coords[ax] = coords[ax] * ratio
    values = sample_field(field.data, coords)
    values = values * (field.grid_scale / target_grid_scale)
    return DisplacementField(values, target_grid_scale)


def upsample_field(field: DisplacementField, target_shape) -> DisplacementField:
    """Upsample by an integer factor; grid_scale shrinks by the same factor."""
    target_shape = tuple(int(n) for n in target_shape)
    factor = _integer_factor(target_shape, field.shape)
    if factor == 1:
        return DisplacementField(field.data.clone(), field.grid_scale)
    if field.grid_scale % factor != 0:
        raise GridError(f"factor {factor} does not divide grid_scale {field.grid_scale}")
    return resample_field(field, target_shape, field.grid_scale // factor)


def _field_on_grid(field: DisplacementField, shape) -> DisplacementField:
    """Upsample ``field`` to the given full-resolution grid if necessary."""
    if field.shape == tuple(shape):
        return field
    return upsample_field(field, shape)


def warp_volume(vol, field: DisplacementField):
    """Warp a volume by a displacement field: out(x) = vol(x + phi(x)).

    Scalar volumes sample trilinearly, label volumes nearest-neighbour; the
    field is upsampled to the volume grid first when it is coarser.
    """
    field = _field_on_grid(field, vol.shape)
    if field.grid_scale != 1:
        raise GridError(f"field upsampled to volume grid must reach grid_scale 1, "
                        f"got {field.grid_scale}")
    coords = node_grid(vol.shape, dtype=field.data.dtype, device=field.data.device) + field.data
    if isinstance(vol, LabelVolume):
        warped = sample_values(vol.data.unsqueeze(0), coords, mode="nearest")[0]
        return LabelVolume(warped, vol.spacing)
    data = vol.data
    if data.dtype != coords.dtype:
        coords = coords.to(data.dtype)
    warped = sample_values(data.unsqueeze(0), coords, mode="linear")[0]
    return Volume(warped, vol.spacing)


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Compose: result(x) = inner(x) + outer(x + inner(x)), outer sampled trilinearly."""
    if outer.grid_scale != inner.grid_scale or outer.shape != inner.shape:
        raise GridError(f"cannot compose fields on different grids: "
                        f"{outer.shape}@{outer.grid_scale} vs {inner.shape}@{inner.grid_scale}")
    coords = node_grid(inner.shape, dtype=inner.data.dtype, device=inner.data.device) + inner.data
    return DisplacementField(inner.data + sample_field(outer.data, coords), inner.grid_scale)


def apply_affine(vol, transform: AffineTransform):
    """Resample a volume through an affine: out(x) = vol(matrix @ x + offset)."""
    coords = node_grid(vol.shape,
                       dtype=vol.data.dtype if vol.data.is_floating_point() else torch.float32,
                       device=vol.data.device)
    coords = transform.apply_points(coords)
    if isinstance(vol, LabelVolume):
        out = sample_values(vol.data.unsqueeze(0), coords, mode="nearest")[0]
        return LabelVolume(out, vol.spacing)
    out = sample_values(vol.data.unsqueeze(0), coords, mode="linear")[0]
    return Volume(out, vol.spacing)


def transform_field_for_affine_pair(field: DisplacementField,
                                    fixed_affine: AffineTransform,
                                    moving_affine: AffineTransform) -> DisplacementField:
    """Carry a fixed->moving field into an affinely augmented frame.

    For F' = F o A_F and M' = M o A_M the returned field phi' satisfies
    phi'(x) = A_M^-1(A_F(x) + phi(A_F(x))) - x, the unique field that keeps
    the correspondence diagram commuting.
    """
    if field.grid_scale != 1:
        raise GridError("transform_field_for_affine_pair needs a dense (grid_scale 1) field")
    x = node_grid(field.shape, dtype=field.data.dtype, device=field.data.device)
    y = fixed_affine.apply_points(x)
    phi_at_y = sample_field(field.data, y)
    mapped = moving_affine.inverse().apply_points(y + phi_at_y)
    return DisplacementField(mapped - x, 1)


def jacobian_determinant(field: DisplacementField) -> torch.Tensor:
    """det(I + grad(phi)) per node, central differences (one-sided at borders)."""
    comps = field.data
    grads = []
    for c in range(3):
        row = []
        for ax in range(3):
            if comps.shape[1 + ax] > 1:
                row.append(torch.gradient(comps[c], dim=ax, edge_order=1)[0])
            else:
                row.append(torch.zeros_like(comps[c]))
        grads.append(row)
    a = [[grads[i][j] + (1.0 if i == j else 0.0) for j in range(3)] for i in range(3)]
    det = (a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
           - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
           + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]))
    return det


def zero_field(shape, grid_scale: int = 1, dtype=torch.float32) -> DisplacementField:
    return DisplacementField(torch.zeros(3, *[int(n) for n in shape], dtype=dtype), grid_scale)
