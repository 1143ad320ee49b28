"""Greedy multi-resolution registration loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np
from scipy.ndimage import gaussian_filter

from .field import (StepScale, as_volume, compose_warp, jacobian_det_min, normalize_step,
                    zero_field)
from .lmopt import (AdamConfig, AdamOptimizer, GdConfig, GDOptimizer, LmConfig, LmState,
                    RegState, StepLog, lm_iterate)
from .pyramid import PyramidSchedule, downsample, upsample_warp
from .similarity import MetricConfig, residual

log = logging.getLogger(__name__)

OPTIMIZERS = ("lm", "adam", "gd")


@dataclass(frozen=True)
class RegConfig:
    metric: MetricConfig = MetricConfig()
    optimizer: str = "lm"
    lm: LmConfig = LmConfig()
    adam: AdamConfig = AdamConfig()
    gd: GdConfig = GdConfig()
    schedule: PyramidSchedule = PyramidSchedule()
    step: StepScale = StepScale()
    sigma_update: float = 1.0
    sigma_warp: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if self.sigma_update < 0 or self.sigma_warp < 0:
            raise ValueError("smoothing sigmas must be >= 0")


@dataclass
class TraceRow:
    level: int
    iter: int
    loss_raw: float
    r: float
    lam: float
    eps: float
    accepted: bool
    retries: int
    jac_det_min: float
    update_norm: float


TRACE_COLUMNS = ("level", "iter", "loss_raw", "r", "lambda", "eps", "accepted", "retries",
                 "jac_det_min")


@dataclass
class RegResult:
    final_warp: np.ndarray
    loss_trace: list = field(default_factory=list)
    jac_det_min_final: float = 1.0
    final_lambda: float = float("nan")
    aborted: str = ""

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1].r if self.loss_trace else float("nan")

    @property
    def steps_rejected(self) -> int:
        return sum(row.retries for row in self.loss_trace)


def smooth_field(v: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return v
    return np.stack([gaussian_filter(v[..., c], sigma, mode="nearest", truncate=3.0)
                     for c in range(3)], axis=-1)


def endpoint_error(u_est: np.ndarray, u_true: np.ndarray, border: int = 2):
    """Mean and max Euclidean displacement error away from a ``border``-voxel rim."""
    if u_est.shape != u_true.shape:
        raise ValueError(f"field shapes differ: {u_est.shape} vs {u_true.shape}")
    core = tuple(slice(border, n - border) if n > 2 * border else slice(None)
                 for n in u_est.shape[:3])
    err = np.linalg.norm(u_est[core] - u_true[core], axis=-1)
    return float(err.mean()), float(err.max())


def _safe_jac(inc):
    return jacobian_det_min(inc) if min(inc.shape[:3]) >= 2 else 1.0


def first_order_iterate(reg: RegState, residual_fn, opt, step: StepScale = StepScale(),
                        smooth_update=None, smooth_warp=None):
    """One Adam or gradient-descent step through the same smooth/normalize/compose path."""
    v = opt.direction(reg.report.g)
    if smooth_update is not None:
        v = smooth_update(v)
    v, eps = normalize_step(v, step)
    u_new = compose_warp(reg.u, v, eps)
    if smooth_warp is not None:
        u_new = smooth_warp(u_new)
    report = residual_fn(u_new)
    if not np.isfinite(report.r):
        raise FloatingPointError(f"non-finite loss {report.r}")
    slog = StepLog(loss=report.r, lam=float("nan"), eps=eps, accepted=True, retries=0,
                   jac_det_min=_safe_jac(eps * v),
                   update_norm=float(np.sqrt(np.max(np.sum(v * v, axis=-1)))) if v.size else 0.0)
    return RegState(u_new, report), slog


def register(fixed, moving, cfg: RegConfig = RegConfig()) -> RegResult:
    """Register ``moving`` onto ``fixed``; the warp maps fixed grid points into moving."""
    fixed = as_volume(fixed, "fixed")
    moving = as_volume(moving, "moving")
    if fixed.shape != moving.shape:
        raise ValueError(f"fixed {fixed.shape} and moving {moving.shape} differ in size")

    smooth_update = partial(smooth_field, sigma=cfg.sigma_update)
    smooth_warp = partial(smooth_field, sigma=cfg.sigma_warp)
    result = RegResult(final_warp=zero_field(fixed.shape))
    lm_state = LmState.initial(cfg.lm)
    u = None
    prev_factor = None

    for level, (factor, iters) in enumerate(cfg.schedule.levels):
        f_l = downsample(fixed, factor)
        m_l = downsample(moving, factor)
        if u is None:
            u = zero_field(f_l.shape)
        else:
            u = upsample_warp(u, f_l.shape, prev_factor / factor)
        prev_factor = factor

        residual_fn = partial(residual, f_l, m_l, cfg=cfg.metric)
        reg = RegState(u, residual_fn(u))
        # loss history does not carry across resolutions; λ does
        lm_state = replace(lm_state, loss_hist=())
        if cfg.optimizer == "adam":
            opt = AdamOptimizer(cfg.adam, u.shape)
        elif cfg.optimizer == "gd":
            opt = GDOptimizer(cfg.gd)

        for it in range(iters):
            try:
                if cfg.optimizer == "lm":
                    reg, lm_state, slog = lm_iterate(reg, residual_fn, cfg.lm, lm_state,
                                                     cfg.step, smooth_update, smooth_warp)
                    row = TraceRow(level, it, reg.report.loss_raw, reg.report.r, slog.lam,
                                   slog.eps, slog.accepted, slog.retries, slog.jac_det_min,
                                   slog.update_norm)
                else:
                    reg, slog = first_order_iterate(reg, residual_fn, opt, cfg.step,
                                                    smooth_update, smooth_warp)
                    row = TraceRow(level, it, reg.report.loss_raw, reg.report.r, float("nan"),
                                   slog.eps, True, 0, slog.jac_det_min, slog.update_norm)
            except FloatingPointError as exc:
                log.error("aborting at level %d iter %d: %s", level, it, exc)
                result.aborted = str(exc)
                result.final_warp = reg.u
                result.final_lambda = lm_state.lam
                return result
            result.loss_trace.append(row)
        u = reg.u

    result.final_warp = u
    result.final_lambda = lm_state.lam
    result.jac_det_min_final = _safe_jac(u)
    return result
