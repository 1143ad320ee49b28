"""Similarity residuals and their gradients with respect to the displacement.

Each metric is expressed as a single non-negative scalar residual ``r`` whose
square is the quantity being minimised:

* ``mse``:  r = mean((f - m o phi)^2)
* ``lncc``: r = 1 - LNCC
* ``mi``:   r = log2(B) - MI

``g`` is always the exact gradient of ``r`` with respect to ``u``; gradients of
the warped moving image come from the trilinear interpolant itself, so ``g``
agrees with finite differences of ``r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter1d

from .field import warp_volume

METRICS = ("mse", "lncc", "mi")

# per-voxel variance below which a window is treated as flat
_FLAT_VAR = 1e-10
_DENSITY_FLOOR = 1e-12
_PARZEN_TRUNCATE = 4.0


@dataclass(frozen=True)
class MetricConfig:
    kind: str = "mse"
    lncc_radius: int = 2
    mi_bins: int = 32
    mi_parzen_sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in METRICS:
            raise ValueError(f"unknown metric {self.kind!r}; choose from {METRICS}")
        if self.lncc_radius < 1:
            raise ValueError("lncc_radius must be >= 1")
        if self.mi_bins < 2:
            raise ValueError("mi_bins must be >= 2")
        if self.mi_parzen_sigma <= 0:
            raise ValueError("mi_parzen_sigma must be positive")


@dataclass
class ResidualReport:
    r: float
    g: Optional[np.ndarray]
    loss_raw: float
    # MSE only: f - m(x + u(x)) and grad m(x + u(x)), used by the Demons path
    per_voxel: Optional[np.ndarray] = None
    moving_grad: Optional[np.ndarray] = None


def _check(fixed, moving, u):
    if fixed.shape != moving.shape or u.shape != fixed.shape + (3,):
        raise ValueError(
            f"dimension mismatch: fixed {fixed.shape}, moving {moving.shape}, u {u.shape}")


def residual_mse(fixed, moving, u, with_grad=True) -> ResidualReport:
    _check(fixed, moving, u)
    if with_grad:
        warped, dm = warp_volume(moving, u, with_grad=True)
    else:
        warped, dm = warp_volume(moving, u), None
    diff = fixed - warped
    r = float(np.mean(diff * diff))
    g = None
    if with_grad:
        g = (-2.0 / diff.size) * diff[..., None] * dm
    return ResidualReport(r=r, g=g, loss_raw=r, per_voxel=diff, moving_grad=dm)


def box_sum(vol, radius):
    """Sum over the cubic window of side ``2*radius+1``, zero outside the grid."""
    size = 2 * radius + 1
    out = vol
    for axis in range(3):
        out = uniform_filter1d(out, size, axis=axis, mode="constant", cval=0.0) * size
    return out


def residual_lncc(fixed, moving, u, cfg=MetricConfig("lncc"), with_grad=True) -> ResidualReport:
    _check(fixed, moving, u)
    rad = cfg.lncc_radius
    if min(fixed.shape) <= 2 * rad:
        raise ValueError(f"LNCC window of radius {rad} does not fit grid {fixed.shape}")
    if with_grad:
        warped, dm = warp_volume(moving, u, with_grad=True)
    else:
        warped = warp_volume(moving, u)

    f, w = fixed, warped
    n = box_sum(np.ones_like(f), rad)
    s_f, s_w = box_sum(f, rad), box_sum(w, rad)
    cross = box_sum(f * w, rad) - s_f * s_w / n
    var_f = box_sum(f * f, rad) - s_f * s_f / n
    var_w = box_sum(w * w, rad) - s_w * s_w / n

    ok = (var_f > _FLAT_VAR * n) & (var_w > _FLAT_VAR * n)
    inv = np.zeros_like(f)
    inv[ok] = 1.0 / np.sqrt(var_f[ok] * var_w[ok])
    cc = cross * inv
    lncc = float(np.mean(cc))
    r = 1.0 - lncc
    g = None
    if with_grad:
        # d cc / d (window sums), zero on flat windows
        vw = np.where(ok, var_w, 1.0)
        d_fw = inv
        d_ww = -0.5 * cc / vw
        d_w = -s_f * inv / n - 2.0 * d_ww * s_w / n
        # box_sum is self-adjoint for a symmetric zero-padded window
        dlncc = (f * box_sum(d_fw, rad) + 2.0 * w * box_sum(d_ww, rad)
                 + box_sum(d_w, rad)) / f.size
        g = -dlncc[..., None] * dm
    return ResidualReport(r=r, g=g, loss_raw=lncc)


def _unit_range(vol):
    lo, hi = float(vol.min()), float(vol.max())
    if hi - lo <= 0:
        return np.zeros_like(vol)
    return (vol - lo) / (hi - lo)


def parzen_weights(t, bins, sigma, with_grad=False):
    """Per-sample Gaussian bin memberships, each row normalised to sum to one.

    ``t`` holds continuous bin coordinates in ``[0, bins-1]``.
    """
    d = t.reshape(-1, 1) - np.arange(bins, dtype=np.float64)
    k = np.exp(-0.5 * (d / sigma) ** 2) * (np.abs(d) <= _PARZEN_TRUNCATE * sigma)
    s = k.sum(axis=1, keepdims=True)
    w = k / s
    if not with_grad:
        return w
    dk = -d / sigma**2 * k
    dw = (dk - w * dk.sum(axis=1, keepdims=True)) / s
    return w, dw


def joint_histogram(fixed, warped, bins, sigma):
    """Parzen joint density of two unit-range images plus per-voxel weights."""
    wf = parzen_weights(fixed * (bins - 1), bins, sigma)
    wm, dwm = parzen_weights(warped * (bins - 1), bins, sigma, with_grad=True)
    joint = wf.T @ wm / wf.shape[0]
    return joint, wf, wm, dwm


def mutual_information(joint):
    """Mutual information in bits of a normalised joint density."""
    pf = joint.sum(axis=1)
    pm = joint.sum(axis=0)
    log_p = np.log(np.maximum(joint, _DENSITY_FLOOR))
    log_pf = np.log(np.maximum(pf, _DENSITY_FLOOR))
    log_pm = np.log(np.maximum(pm, _DENSITY_FLOOR))
    mi = np.sum(joint * (log_p - log_pf[:, None] - log_pm[None, :])) / math.log(2.0)
    return float(mi), log_p, log_pm


def residual_mi(fixed, moving, u, cfg=MetricConfig("mi"), with_grad=True) -> ResidualReport:
    _check(fixed, moving, u)
    bins, sigma = cfg.mi_bins, cfg.mi_parzen_sigma
    f = _unit_range(fixed)
    m = _unit_range(moving)
    if with_grad:
        warped, dm = warp_volume(m, u, with_grad=True)
    else:
        warped = warp_volume(m, u)
    joint, wf, wm, dwm = joint_histogram(f, warped, bins, sigma)
    mi, log_p, log_pm = mutual_information(joint)
    r = math.log2(bins) - mi
    g = None
    if with_grad:
        n = f.size
        # d MI / d t_m(x); the marginal of the fixed image does not depend on u
        dmi_dt = np.sum(dwm * (wf @ log_p - log_pm[None, :]), axis=1) / (n * math.log(2.0))
        dmi = (dmi_dt * (bins - 1)).reshape(f.shape)
        g = -dmi[..., None] * dm
    return ResidualReport(r=r, g=g, loss_raw=mi)


def residual(fixed, moving, u, cfg: MetricConfig, with_grad=True) -> ResidualReport:
    if cfg.kind == "mse":
        return residual_mse(fixed, moving, u, with_grad=with_grad)
    if cfg.kind == "lncc":
        return residual_lncc(fixed, moving, u, cfg, with_grad=with_grad)
    return residual_mi(fixed, moving, u, cfg, with_grad=with_grad)
