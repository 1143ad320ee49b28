import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from warplm.field import zero_field
from warplm.similarity import (MetricConfig, residual, residual_lncc, residual_mi, residual_mse)

from conftest import smooth_random
from oracles import hard_histogram_mi, parzen_mi_loop

H = 1e-4


def fd_check(fn, fixed, moving, u, rng, tol, count=30):
    """Compare g against central differences of r at ``count`` random components.

    Components whose sample coordinate sits within 2h of a grid plane are
    skipped: the trilinear interpolant has a kink there and the two-sided
    difference straddles it.
    """
    g = fn(fixed, moving, u).g
    checked = 0
    while checked < count:
        idx = tuple(int(rng.integers(n)) for n in u.shape[:3])
        c = int(rng.integers(3))
        coord = idx[c] + u[idx + (c,)]
        if abs(coord - round(coord)) < 2 * H or not 0 < coord < u.shape[c] - 1:
            continue
        up, dn = u.copy(), u.copy()
        up[idx + (c,)] += H
        dn[idx + (c,)] -= H
        fd = (fn(fixed, moving, up).r - fn(fixed, moving, dn).r) / (2 * H)
        scale = max(abs(fd), 1e-3 * np.max(np.abs(g)))
        assert abs(g[idx + (c,)] - fd) <= tol * scale, (idx, c, g[idx + (c,)], fd)
        checked += 1


def smooth_pair(rng, n):
    fixed = smooth_random(rng, (n, n, n), sigma=1.5, scale=4.0)
    moving = smooth_random(rng, (n, n, n), sigma=1.5, scale=4.0)
    u = smooth_random(rng, (n, n, n, 3), sigma=2.0, scale=3.0)
    return fixed, moving, u


def test_mse_examples(rng):
    vol = rng.standard_normal((5, 5, 5))
    rep = residual_mse(vol, vol, zero_field(vol.shape))
    assert rep.r == 0 and not np.any(rep.g)
    rep = residual_mse(np.zeros((4, 4, 4)), np.ones((4, 4, 4)), zero_field((4, 4, 4)))
    assert rep.r == 1.0


def test_mse_matches_plain_mean(rng):
    f, m = rng.standard_normal((2, 7, 6, 5))
    assert residual_mse(f, m, zero_field(f.shape)).r == pytest.approx(((f - m) ** 2).mean(), abs=1e-12)


def test_mse_gradient(rng):
    f, m, u = smooth_pair(rng, 8)
    fd_check(residual_mse, f, m, u, rng, tol=1e-4)


def test_lncc_affine_intensity(rng):
    f = rng.uniform(size=(8, 8, 8))
    rep = residual_lncc(f, 2 * f + 3, zero_field(f.shape))
    assert rep.loss_raw == pytest.approx(1.0, abs=1e-10)
    assert rep.r == pytest.approx(0.0, abs=1e-10)


def test_lncc_flat_fixed(rng):
    rep = residual_lncc(np.full((6, 6, 6), 2.0), rng.uniform(size=(6, 6, 6)), zero_field((6, 6, 6)))
    assert rep.loss_raw == 0.0 and rep.r == 1.0
    assert not np.any(rep.g)


def test_lncc_gradient(rng):
    f, m, u = smooth_pair(rng, 12)
    fd_check(residual_lncc, f, m, u, rng, tol=1e-3)


def test_lncc_window_must_fit():
    with pytest.raises(ValueError):
        residual_lncc(np.zeros((4, 8, 8)), np.zeros((4, 8, 8)), zero_field((4, 8, 8)))


def test_mi_gradient(rng):
    f, m, u = smooth_pair(rng, 10)
    fd_check(residual_mi, f, m, u, rng, tol=1e-3)


def test_mi_identical_levels_reach_upper_bound():
    bins = 32
    levels = (np.arange(32**3) % bins).reshape(32, 32, 32) / (bins - 1)
    cfg = MetricConfig("mi", mi_bins=bins, mi_parzen_sigma=0.25)
    assert residual_mi(levels, levels, zero_field(levels.shape), cfg).r < 0.2


def test_mi_matches_loop_oracle(rng):
    f = rng.uniform(size=(6, 6, 6))
    m = 0.5 * f + 0.5 * rng.uniform(size=(6, 6, 6))
    cfg = MetricConfig("mi", mi_bins=8)
    rep = residual_mi(f, m, zero_field(f.shape), cfg)
    assert rep.loss_raw == pytest.approx(parzen_mi_loop(f, m, 8, 1.0), abs=1e-10)
    assert rep.r == pytest.approx(3.0 - rep.loss_raw)


def test_mi_independent_noise(rng):
    f, m = rng.uniform(size=(2, 32, 32, 32))
    rep = residual_mi(f, m, zero_field(f.shape))
    assert rep.loss_raw < 0.1
    assert hard_histogram_mi(f, m, 32) < 0.6  # plain histogram is biased upward


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 16), st.floats(0.2, 3.0))
def test_mi_residual_bounds(seed, bins, sigma):
    r = np.random.default_rng(seed)
    f, m = r.uniform(size=(2, 3, 3, 3)) ** r.uniform(0.2, 5)
    rep = residual_mi(f, m, zero_field(f.shape), MetricConfig("mi", mi_bins=bins,
                                                              mi_parzen_sigma=sigma),
                      with_grad=False)
    assert -1e-12 <= rep.loss_raw <= math.log2(bins) + 1e-12
    assert 0 <= rep.r + 1e-12


@pytest.mark.parametrize("kind", ["mse", "mi"])
def test_symmetric_in_identical_inputs_swap(kind, rng):
    f, m = rng.uniform(size=(2, 6, 6, 6))
    cfg = MetricConfig(kind)
    u = zero_field(f.shape)
    assert residual(f, m, u, cfg, False).r == pytest.approx(residual(m, f, u, cfg, False).r, abs=1e-12)


def test_lncc_local_correlation_symmetric(rng):
    f, m = rng.uniform(size=(2, 7, 7, 7))
    u = zero_field(f.shape)
    assert residual_lncc(f, m, u).r == pytest.approx(residual_lncc(m, f, u).r, abs=1e-12)


@pytest.mark.parametrize("kind", ["mse", "lncc", "mi"])
def test_gradient_finite_and_shaped(kind, rng):
    f, m, u = smooth_pair(rng, 9)
    rep = residual(f, m, u, MetricConfig(kind))
    assert rep.g.shape == u.shape and np.all(np.isfinite(rep.g)) and rep.r >= 0


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        residual_mse(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)), zero_field((4, 4, 4)))
    with pytest.raises(ValueError):
        MetricConfig("mi", mi_bins=1)
    with pytest.raises(ValueError):
        MetricConfig("ssd")
