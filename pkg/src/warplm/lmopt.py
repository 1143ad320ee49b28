"""Factored Levenberg-Marquardt optimizer for dense warps, plus baselines.

The LM step treats the whole registration loss as one scalar residual ``r``
with a per-voxel 3-vector Jacobian ``g``.  Replacing the Gauss-Newton Hessian
by the rank-1 block ``g gᵀ`` at every voxel gives the closed-form damped step
``-r g / (|g|² + λ)``; pooling the blocks over a tile gives a 3x3 solve per
tile.  A single scalar λ is the only persistent optimizer state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .field import StepScale, compose_warp, jacobian_det_min, normalize_step

LAMBDA_FLOOR = 1e-12
_FLOAT_BYTES = 8


@dataclass(frozen=True)
class LmConfig:
    lambda0: float = 0.006
    mu_plus: float = 1.5
    mu_minus: float = 0.975
    tile_size: int = 1
    rejection_enabled: bool = False
    tau: float = 1.0
    lambda_max: float = 1.0
    max_retries: int = 10

    def __post_init__(self):
        if not self.mu_plus > 1:
            raise ValueError("mu_plus must be > 1")
        if not 0 < self.mu_minus < 1:
            raise ValueError("mu_minus must lie in (0, 1)")
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be positive")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if not self.lambda_max > 0:
            raise ValueError("lambda_max must be positive (use inf for no cap)")
        if self.max_retries < 0 or self.tau < 0:
            raise ValueError("max_retries and tau must be non-negative")


@dataclass(frozen=True)
class LmState:
    lam: float
    # accepted losses, most recent first: (L[t-1], L[t-2])
    loss_hist: tuple = ()

    @classmethod
    def initial(cls, cfg: LmConfig) -> "LmState":
        return cls(lam=min(cfg.lambda0, cfg.lambda_max))

    def push(self, loss) -> "LmState":
        return replace(self, loss_hist=(loss,) + self.loss_hist[:1])


# ---------------------------------------------------------------------------
# step kernels


def lm_step_pointwise(r, g: np.ndarray, lam) -> np.ndarray:
    """Per-voxel damped rank-1 step ``-r g / (|g|² + λ)``.

    ``r`` and ``lam`` may be scalars or arrays broadcastable to ``g.shape[:-1]``
    (per-voxel residuals are used by the Demons comparison).
    """
    r = np.asarray(r, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    norm2 = np.einsum("...i,...i->...", g, g)
    denom = norm2 + lam
    scale = np.divide(-r, denom, out=np.zeros(np.broadcast(norm2, r, lam).shape), where=denom > 0)
    return scale[..., None] * g


def inverse_3x3(a: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a stack of 3x3 matrices via the adjugate."""
    a00, a01, a02 = a[..., 0, 0], a[..., 0, 1], a[..., 0, 2]
    a10, a11, a12 = a[..., 1, 0], a[..., 1, 1], a[..., 1, 2]
    a20, a21, a22 = a[..., 2, 0], a[..., 2, 1], a[..., 2, 2]
    c00 = a11 * a22 - a12 * a21
    c01 = a12 * a20 - a10 * a22
    c02 = a10 * a21 - a11 * a20
    det = a00 * c00 + a01 * c01 + a02 * c02
    inv = np.empty_like(a)
    inv[..., 0, 0] = c00
    inv[..., 1, 0] = c01
    inv[..., 2, 0] = c02
    inv[..., 0, 1] = a02 * a21 - a01 * a22
    inv[..., 1, 1] = a00 * a22 - a02 * a20
    inv[..., 2, 1] = a01 * a20 - a00 * a21
    inv[..., 0, 2] = a01 * a12 - a02 * a11
    inv[..., 1, 2] = a02 * a10 - a00 * a12
    inv[..., 2, 2] = a00 * a11 - a01 * a10
    return inv / det[..., None, None]


def tile_hessians(g: np.ndarray, k: int) -> np.ndarray:
    """Sum of ``g gᵀ`` over non-overlapping k³ tiles, shape ``tiles + (3, 3)``."""
    dims = g.shape[:3]
    tiles = tuple(-(-n // k) for n in dims)
    padded = np.zeros(tuple(t * k for t in tiles) + (3,))
    padded[: dims[0], : dims[1], : dims[2]] = g
    blocks = padded.reshape(tiles[0], k, tiles[1], k, tiles[2], k, 3)
    return np.einsum("aibjckm,aibjckn->abcmn", blocks, blocks)


def lm_step_tiled(r: float, g: np.ndarray, lam: float, k: int) -> np.ndarray:
    """Tile-pooled step ``-(H_tile + λI)⁻¹ r g(x)`` on a k³ partition."""
    if k < 1:
        raise ValueError("tile size must be >= 1")
    if k == 1:
        return lm_step_pointwise(r, g, lam)
    dims = g.shape[:3]
    h = tile_hessians(g, k) + lam * np.eye(3)
    inv = inverse_3x3(h)
    # broadcast each tile inverse back to its voxels
    for axis in range(3):
        inv = np.repeat(inv, k, axis=axis)
    inv = inv[: dims[0], : dims[1], : dims[2]]
    return -r * np.einsum("...ij,...j->...i", inv, g)


@dataclass(frozen=True)
class DemonsConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


def demons_step_mse(per_voxel_r: np.ndarray, moving_grad: np.ndarray, alpha=1.0) -> np.ndarray:
    """Demons active-force step ``r n / (|n|² + α² r²)``; 0 where both vanish."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    r = per_voxel_r
    n2 = np.einsum("...i,...i->...", moving_grad, moving_grad)
    denom = n2 + alpha**2 * r * r
    scale = np.divide(r, denom, out=np.zeros_like(r), where=denom > 0)
    return scale[..., None] * moving_grad


# ---------------------------------------------------------------------------
# damping schedule


def update_damping(state: LmState, loss_new: float, cfg: LmConfig) -> LmState:
    """Grow λ by μ⁺ after a loss increase, shrink it by μ⁻ otherwise."""
    bad = not state.loss_hist or loss_new > state.loss_hist[0]
    lam = state.lam * (cfg.mu_plus if bad else cfg.mu_minus)
    lam = min(max(lam, LAMBDA_FLOOR), cfg.lambda_max)
    return replace(state, lam=lam).push(loss_new)


def rejection_test(loss_new, loss_prev, loss_prev2, tau) -> bool:
    """True when the loss rose by more than ``tau`` times the previous change."""
    if loss_prev is None or loss_prev2 is None:
        return False
    if loss_new <= loss_prev:
        return False
    return loss_new - loss_prev > tau * abs(loss_prev - loss_prev2)


# ---------------------------------------------------------------------------
# optimizers


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(g: np.ndarray, state: AdamState, cfg: AdamConfig):
    """Bias-corrected Adam direction; returns ``(step, new_state)``."""
    if g.shape != state.m.shape:
        raise ValueError(f"gradient {g.shape} does not match moment buffers {state.m.shape}")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * (g * g)
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    step = -cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps_hat)
    return step, AdamState(m, v, t)


@dataclass(frozen=True)
class GdConfig:
    lr: float = 1.0


class LMOptimizer:
    name = "lm"

    def __init__(self, cfg: LmConfig = LmConfig()):
        self.cfg = cfg
        self.state = LmState.initial(cfg)

    def state_bytes(self, element_size=4) -> int:
        # λ, two losses and the scalar hyperparameters; independent of field size
        n_scalars = 3 + len(self.cfg.__dataclass_fields__)
        return n_scalars * _FLOAT_BYTES


class AdamOptimizer:
    name = "adam"

    def __init__(self, cfg: AdamConfig, shape):
        self.cfg = cfg
        self.shape = tuple(shape)
        self.state = AdamState.zeros(self.shape)

    def direction(self, g):
        step, self.state = adam_step(g, self.state, self.cfg)
        return step

    def state_bytes(self, element_size=4) -> int:
        """Bytes held in the two moment buffers (the step counter is not counted)."""
        return 2 * int(np.prod(self.shape)) * element_size


class GDOptimizer:
    name = "gd"

    def __init__(self, cfg: GdConfig = GdConfig()):
        self.cfg = cfg

    def direction(self, g):
        return -self.cfg.lr * g

    def state_bytes(self, element_size=4) -> int:
        return _FLOAT_BYTES


def state_bytes(optimizer, element_size=4) -> int:
    return optimizer.state_bytes(element_size)


# ---------------------------------------------------------------------------
# one LM iteration with optional rejection


@dataclass
class RegState:
    """Current warp and the residual report evaluated at it."""

    u: np.ndarray
    report: object


@dataclass
class StepLog:
    loss: float
    lam: float
    eps: float
    accepted: bool
    retries: int
    jac_det_min: float
    update_norm: float
    rejected_losses: list = field(default_factory=list)


def lm_direction(report, lam, cfg: LmConfig) -> np.ndarray:
    return lm_step_tiled(report.r, report.g, lam, cfg.tile_size)


def lm_iterate(
    reg: RegState,
    residual_fn: Callable,
    cfg: LmConfig,
    state: LmState,
    step: StepScale = StepScale(),
    smooth_update: Optional[Callable] = None,
    smooth_warp: Optional[Callable] = None,
):
    """Take one (possibly retried) LM step.

    ``residual_fn(u)`` must return an object with ``r`` and ``g``.  Returns the
    new ``RegState``, the new ``LmState`` and a ``StepLog``.
    """
    if not state.loss_hist:
        state = state.push(reg.report.r)
    lam = state.lam
    retries = 0
    rejected = []
    while True:
        v = lm_direction(reg.report, lam, cfg)
        if smooth_update is not None:
            v = smooth_update(v)
        v, eps = normalize_step(v, step)
        inc = eps * v
        u_new = compose_warp(reg.u, v, eps)
        if smooth_warp is not None:
            u_new = smooth_warp(u_new)
        report = residual_fn(u_new)
        loss = report.r
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at lambda={lam:g}")
        prev = state.loss_hist[0]
        prev2 = state.loss_hist[1] if len(state.loss_hist) > 1 else None
        if cfg.rejection_enabled and rejection_test(loss, prev, prev2, cfg.tau):
            if retries < cfg.max_retries:
                rejected.append(loss)
                retries += 1
                lam = min(lam * cfg.mu_plus, cfg.lambda_max)
                continue
            # retries exhausted: keep the last attempt, λ stays where it is
            new_state = replace(state, lam=lam).push(loss)
            break
        new_state = update_damping(replace(state, lam=lam), loss, cfg)
        break

    log = StepLog(
        loss=loss,
        lam=new_state.lam,
        eps=eps,
        accepted=True,
        retries=retries,
        jac_det_min=jacobian_det_min(inc) if min(inc.shape[:3]) >= 2 else 1.0,
        update_norm=float(np.sqrt(np.max(np.einsum("...i,...i->...", v, v)))) if v.size else 0.0,
        rejected_losses=rejected,
    )
    return RegState(u_new, report), new_state, log
