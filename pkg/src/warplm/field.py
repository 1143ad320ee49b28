"""Dense volumes, displacement fields and trilinear warping.

Volumes are float64 arrays of shape ``(nx, ny, nz)`` indexed ``vol[x, y, z]``.
Displacement fields are float64 arrays of shape ``(nx, ny, nz, 3)`` holding the
(x, y, z) displacement of every voxel in voxel units.  Voxel centres sit at
integer coordinates with the origin at ``(0, 0, 0)``; all sampling clamps to
the edge of the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StepScale:
    """Rule used to turn an optimizer direction into a bounded increment."""

    target_max_disp: float = 0.4
    floor: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.target_max_disp < 0.5:
            raise ValueError("target_max_disp must lie in (0, 0.5)")
        if self.floor <= 0:
            raise ValueError("floor must be positive")


def as_volume(data, name="volume") -> np.ndarray:
    vol = np.asarray(data, dtype=np.float64)
    if vol.ndim != 3 or min(vol.shape) < 1:
        raise ValueError(f"{name} must be a non-empty 3-D array, got shape {vol.shape}")
    if not np.all(np.isfinite(vol)):
        raise ValueError(f"{name} contains non-finite values")
    return vol


def as_field(data, name="field") -> np.ndarray:
    u = np.asarray(data, dtype=np.float64)
    if u.ndim != 4 or u.shape[-1] != 3 or min(u.shape) < 1:
        raise ValueError(f"{name} must have shape (nx, ny, nz, 3), got {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError(f"{name} contains non-finite values")
    return u


def zero_field(dims) -> np.ndarray:
    return np.zeros(tuple(dims) + (3,), dtype=np.float64)


def identity_grid(dims) -> np.ndarray:
    """Voxel coordinates of every grid point, shape ``dims + (3,)``."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _cell(points, shape):
    # lower corner index, fractional offset and a per-axis "inside" mask used
    # to zero the derivative where clamping makes the interpolant flat
    n = np.asarray(shape)
    lo = np.clip(points, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(lo).astype(np.intp), np.maximum(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    t = lo - i0
    inside = (points >= 0.0) & (points <= n - 1.0) & (n > 1)
    return i0, i1, t, inside


def trilinear(vol: np.ndarray, points: np.ndarray, with_grad=False):
    """Sample ``vol`` at continuous ``points`` (shape ``(..., 3)``).

    With ``with_grad`` also returns the derivative of the interpolant with
    respect to the sample position, shape ``(..., 3)``.  The derivative is the
    exact one-sided slope of the piecewise-trilinear function, which is what a
    finite-difference probe of the sampled value sees.
    """
    i0, i1, t, inside = _cell(points, vol.shape)
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    x1, y1, z1 = i1[..., 0], i1[..., 1], i1[..., 2]
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]

    c000 = vol[x0, y0, z0]
    c100 = vol[x1, y0, z0]
    c010 = vol[x0, y1, z0]
    c110 = vol[x1, y1, z0]
    c001 = vol[x0, y0, z1]
    c101 = vol[x1, y0, z1]
    c011 = vol[x0, y1, z1]
    c111 = vol[x1, y1, z1]

    # (1-t)*a + t*b is exact at t in {0, 1}, so grid values come back bit-exact
    sx = 1.0 - tx
    c00 = sx * c000 + tx * c100
    c10 = sx * c010 + tx * c110
    c01 = sx * c001 + tx * c101
    c11 = sx * c011 + tx * c111
    c0 = (1.0 - ty) * c00 + ty * c10
    c1 = (1.0 - ty) * c01 + ty * c11
    val = (1.0 - tz) * c0 + tz * c1
    if not with_grad:
        return val

    wy0, wz0 = 1.0 - ty, 1.0 - tz
    dx = (wy0 * wz0 * (c100 - c000) + ty * wz0 * (c110 - c010)
          + wy0 * tz * (c101 - c001) + ty * tz * (c111 - c011))
    dy = (1.0 - tz) * (c10 - c00) + tz * (c11 - c01)
    dz = c1 - c0
    grad = np.stack([dx, dy, dz], axis=-1) * inside
    return val, grad


def sample_trilinear(vol: np.ndarray, p) -> float:
    """Value of ``vol`` at one continuous point, clamp-to-edge."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"sample point must be a finite 3-vector, got {p!r}")
    return float(trilinear(vol, p))


def warp_volume(vol: np.ndarray, u: np.ndarray, with_grad=False):
    """Resample ``vol`` through ``Id + u``: returns ``vol(x + u(x))``."""
    if vol.shape != u.shape[:3]:
        raise ValueError(f"volume {vol.shape} and field {u.shape[:3]} differ in size")
    return trilinear(vol, identity_grid(vol.shape) + u, with_grad=with_grad)


def sample_field(u: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear sample of every component of ``u`` at ``points``."""
    return np.stack([trilinear(u[..., c], points) for c in range(3)], axis=-1)


def compose_warp(u: np.ndarray, v: np.ndarray, eps: float) -> np.ndarray:
    """Compositive update ``eps*v + u o (Id + eps*v)``."""
    if u.shape != v.shape:
        raise ValueError(f"field shapes differ: {u.shape} vs {v.shape}")
    if not eps > 0:
        raise ValueError("eps must be positive")
    step = eps * v
    if not np.any(u):
        return step
    return step + sample_field(u, identity_grid(u.shape[:3]) + step)


def max_abs_component(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def normalize_step(v: np.ndarray, scale: StepScale = StepScale()):
    """Pick ``eps`` so the largest per-axis component of ``eps*v`` is the target."""
    eps = scale.target_max_disp / max(max_abs_component(v), scale.floor)
    return v, eps


def jacobian_det(u: np.ndarray) -> np.ndarray:
    """``det(I + grad u)`` with central differences (one-sided at the border)."""
    dims = u.shape[:3]
    if min(dims) < 2:
        raise ValueError("jacobian needs at least 2 voxels per axis")
    # jac[..., i, j] = d u_i / d x_j
    jac = np.stack(np.gradient(u, axis=(0, 1, 2)), axis=-1)
    jac = jac + np.eye(3)
    return np.linalg.det(jac)


def jacobian_det_min(u: np.ndarray) -> float:
    """Minimum Jacobian determinant over interior voxels of ``Id + u``."""
    det = jacobian_det(u)
    interior = tuple(slice(1, -1) if n >= 3 else slice(None) for n in det.shape)
    return float(det[interior].min())
