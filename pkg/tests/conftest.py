"""Shared fixtures and independent scalar reference implementations.

The reference functions here are deliberately written as plain Python/numpy
loops so they share no code with the package's vectorized implementations.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def scalar_trilinear(data: np.ndarray, point) -> float:
    """Clamp-to-edge trilinear interpolation at one 3D point (reference)."""
    D, H, W = data.shape
    z = min(max(float(point[0]), 0.0), D - 1)
    y = min(max(float(point[1]), 0.0), H - 1)
    x = min(max(float(point[2]), 0.0), W - 1)
    z0, y0, x0 = int(np.floor(z)), int(np.floor(y)), int(np.floor(x))
    z1, y1, x1 = min(z0 + 1, D - 1), min(y0 + 1, H - 1), min(x0 + 1, W - 1)
    wz, wy, wx = z - z0, y - y0, x - x0
    total = 0.0
    for iz, fz in ((z0, 1 - wz), (z1, wz)):
        for iy, fy in ((y0, 1 - wy), (y1, wy)):
            for ix, fx in ((x0, 1 - wx), (x1, wx)):
                total += fz * fy * fx * float(data[iz, iy, ix])
    return total


def scalar_jacobian_determinant(field: np.ndarray) -> np.ndarray:
    """det(I + grad(phi)) with central differences, one-sided at borders."""
    _, D, H, W = field.shape
    out = np.zeros((D, H, W))

    def diff(comp, ax, idx):
        lo = list(idx)
        hi = list(idx)
        n = field.shape[1 + ax]
        if idx[ax] == 0:
            hi[ax] += 1
            return field[(comp, *hi)] - field[(comp, *lo)]
        if idx[ax] == n - 1:
            lo[ax] -= 1
            return field[(comp, *hi)] - field[(comp, *lo)]
        lo[ax] -= 1
        hi[ax] += 1
        return (field[(comp, *hi)] - field[(comp, *lo)]) / 2.0

    for z in range(D):
        for y in range(H):
            for x in range(W):
                J = np.eye(3)
                for c in range(3):
                    for ax in range(3):
                        J[c, ax] += diff(c, ax, (z, y, x))
                out[z, y, x] = np.linalg.det(J)
    return out


def smooth_random_field(shape, magnitude, sigma, seed, dtype=torch.float32):
    """Gaussian-smoothed random vector noise scaled to a max norm (test helper)."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(3, *shape))
    raw = np.stack([gaussian_filter(raw[c], sigma) for c in range(3)])
    norms = np.sqrt((raw ** 2).sum(axis=0))
    peak = norms.max()
    if peak > 0:
        raw = raw * (magnitude / peak)
    return torch.as_tensor(raw, dtype=dtype)
