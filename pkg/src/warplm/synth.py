"""Synthetic blob images with known smooth deformations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .field import identity_grid, jacobian_det_min, sample_field

MAX_RESAMPLES = 10
# blob centres are kept this far (as a fraction of the extent) from the border
CENTRE_MARGIN = 0.1
# blob standard deviations as fractions of the smallest dimension
WIDTH_RANGE = (0.03, 0.06)


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple = (32, 32, 32)
    num_blobs: int = 400
    warp_sigma: float = 8.0
    warp_max: float = 3.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError("dims must be three sizes >= 2")
        if min(self.num_blobs, self.warp_sigma, self.warp_max, self.noise_sigma) < 0:
            raise ValueError("synthetic parameters must be non-negative")
        if self.warp_max and self.warp_max >= min(self.dims) / 4:
            raise ValueError("warp_max must be below a quarter of the smallest dimension")


@dataclass(frozen=True)
class Blobs:
    """Analytic sum of isotropic Gaussian blobs."""

    centres: np.ndarray
    widths: np.ndarray
    amps: np.ndarray

    @classmethod
    def random(cls, dims, num_blobs, rng) -> "Blobs":
        dims_arr = np.asarray(dims, dtype=np.float64)
        centres = rng.uniform(CENTRE_MARGIN, 1 - CENTRE_MARGIN, size=(num_blobs, 3)) * (dims_arr - 1)
        widths = rng.uniform(*WIDTH_RANGE, size=num_blobs) * dims_arr.min()
        amps = rng.uniform(0.5, 1.0, size=num_blobs)
        return cls(centres, widths, amps)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        out = np.zeros(points.shape[:-1])
        for c, w, a in zip(self.centres, self.widths, self.amps):
            d2 = np.sum((points - c) ** 2, axis=-1)
            out += a * np.exp(-0.5 * d2 / w**2)
        return out


def random_warp(dims, sigma, max_disp, rng) -> np.ndarray:
    """Smooth random field scaled so its largest vector has length ``max_disp``."""
    noise = rng.standard_normal(tuple(dims) + (3,))
    u = np.stack([gaussian_filter(noise[..., c], sigma, mode="wrap") if sigma > 0
                  else noise[..., c] for c in range(3)], axis=-1)
    peak = np.max(np.linalg.norm(u, axis=-1))
    if peak == 0 or max_disp == 0:
        return np.zeros_like(u)
    return u * (max_disp / peak)


def synth_pair(spec: SynthSpec = SynthSpec()):
    """Return ``(fixed, moving, u_true)`` with ``moving(x + u_true(x)) ≈ fixed(x)``.

    Both images are evaluated analytically: ``fixed`` on the grid and
    ``moving`` at the inverse-mapped grid points, so that registering
    ``moving`` onto ``fixed`` recovers ``u_true`` up to interpolation error.
    """
    rng = np.random.default_rng(spec.seed)
    blobs = Blobs.random(spec.dims, spec.num_blobs, rng)
    for _ in range(MAX_RESAMPLES):
        u_true = random_warp(spec.dims, spec.warp_sigma, spec.warp_max, rng)
        if jacobian_det_min(u_true) > 0:
            break
    else:
        raise RuntimeError(f"no diffeomorphic warp after {MAX_RESAMPLES} draws")

    fixed = blobs(identity_grid(spec.dims))
    moving = blobs(invert_points(u_true))
    if spec.noise_sigma > 0:
        fixed = fixed + spec.noise_sigma * rng.standard_normal(spec.dims)
        moving = moving + spec.noise_sigma * rng.standard_normal(spec.dims)
    return fixed, moving, u_true


def invert_points(u: np.ndarray, iterations: int = 50) -> np.ndarray:
    """Points ``z`` with ``z + u(z) = x`` for every grid point ``x`` (fixed-point)."""
    grid = identity_grid(u.shape[:3])
    z = grid.copy()
    for _ in range(iterations):
        z = grid - sample_field(u, z)
    return z
