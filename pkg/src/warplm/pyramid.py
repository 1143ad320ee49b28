"""Coarse-to-fine schedules, image decimation and warp inheritance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .field import identity_grid, sample_field

SMOOTH_TRUNCATE = 3.0


@dataclass(frozen=True)
class PyramidSchedule:
    """Pyramid levels as ``(downsample_factor, iterations)``, coarse first."""

    levels: tuple = ((4, 100), (2, 75), (1, 50))

    def __post_init__(self):
        levels = tuple((int(f), int(n)) for f, n in self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ValueError("schedule needs at least one level")
        factors = [f for f, _ in levels]
        if any(f < 1 for f in factors) or any(n < 0 for _, n in levels):
            raise ValueError("factors must be >= 1 and iterations >= 0")
        if any(a <= b for a, b in zip(factors, factors[1:])):
            raise ValueError("factors must be strictly decreasing")
        if factors[-1] != 1:
            raise ValueError("final level must have factor 1")

    @property
    def total_iterations(self) -> int:
        return sum(n for _, n in self.levels)


def level_dims(dims, factor):
    return tuple(-(-n // factor) for n in dims)


def downsample(vol: np.ndarray, factor: int) -> np.ndarray:
    """Gaussian anti-aliasing (sigma = factor/2) followed by strided sampling."""
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    if factor == 1:
        return vol.copy()
    smooth = gaussian_filter(vol, 0.5 * factor, mode="nearest", truncate=SMOOTH_TRUNCATE)
    return smooth[::factor, ::factor, ::factor].copy()


def upsample_warp(u: np.ndarray, new_dims, scale: float) -> np.ndarray:
    """Resample a displacement field onto a grid ``scale`` times finer.

    Fine voxel ``X`` sits at coarse coordinate ``X / scale``; displacements are
    multiplied by ``scale`` to stay in voxel units of the new grid.
    """
    new_dims = tuple(int(n) for n in new_dims)
    if len(new_dims) != 3 or min(new_dims) < 1:
        raise ValueError(f"invalid target dims {new_dims}")
    if not scale > 0:
        raise ValueError("scale must be positive")
    if new_dims == u.shape[:3] and scale == 1:
        return u.copy()
    coarse_pts = identity_grid(new_dims) / scale
    return sample_field(u, coarse_pts) * scale
