import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lighttune.ff_core import MlpModel, forward_pass, init_model, layer_gradient, quadratic_loss
from lighttune.verify import (
    activation_bound,
    bound_constants,
    decay_monitor,
    fast_finite_diff,
    finite_diff_gradient,
    gradient_bound,
    gradient_check_sweep,
    lemma_sweep,
    loss_bound,
    mac_budget,
    smoothness_const,
    taylor_gap,
    taylor_gap_sweep,
)

# --- bound constants --------------------------------------------------------


def test_activation_bound_plug_in():
    bc = activation_bound([3, 4], 1.0, 1.0)
    assert bc.B_layers == [1.0, 4.0] and bc.B_h == 4.0
    bc = activation_bound([3, 4, 5], 1.5, 0.0)
    assert bc.B_layers[1:] == [0.0, 0.0] and bc.B_h == 1.5


def test_activation_bound_bler_dims():
    bc = activation_bound([13, 32, 32], 2.0, 1.0)
    # sqrt(32) * 3 and sqrt(32) * (sqrt(32) * 3 + 1) = 96 + 4 sqrt(2)
    assert bc.B_layers[1] == pytest.approx(12 * math.sqrt(2), rel=1e-14)
    assert bc.B_layers[2] == pytest.approx(96 + 4 * math.sqrt(2), rel=1e-14)
    assert bc.B_h >= bc.B_z


def test_formula_plug_ins():
    assert gradient_bound(1.0, 0.0, 1) == 48.0
    assert gradient_bound(1.0, 0.0, 2) == 24.0
    assert loss_bound(1.0, 0.0) == 21.0
    assert smoothness_const(1.0, 0.0, 1) == 160.0


def test_loss_bound_monotone():
    grid = np.linspace(0, 5, 11)
    for B in grid:
        vals = [loss_bound(B, T) for T in grid]
        assert all(b > a for a, b in zip(vals, vals[1:]))
    for T in grid:
        vals = [loss_bound(B, T) for B in grid]
        assert all(b > a for a, b in zip(vals, vals[1:]))


def test_lr_admissibility():
    bc = bound_constants([13, 32, 32], 2.0, 1.0, 9.0)
    assert bc.lr_admissible(0.5 / bc.rho[-1])
    assert not bc.lr_admissible(1.0 / bc.rho[-1])
    assert len(bc.grad_bounds) == len(bc.rho) == 2


def test_lemma_sweep_small():
    rep = lemma_sweep([5, 6, 4], 2.0, 1.0, 9.0, n_samples=400, n_pairs=200, seed=1)
    assert rep.total_violations == 0
    assert all(0 < r <= 1 for r in rep.max_ratio.values())


# --- finite differences -----------------------------------------------------


def _smooth_point(seed=0):
    rng = np.random.default_rng(seed)
    while True:
        m = MlpModel([rng.normal(size=(3, 4)), rng.normal(size=(2, 4))])
        zp, zn = rng.normal(size=3), rng.normal(size=3)
        fd = finite_diff_gradient(m, zp, zn, 2, step=1e-5, T=1.0)
        if fd.margin > 0.05 and forward_pass(m, zp).h[2].any():
            return m, zp, zn


def test_finite_diff_zero_region():
    m = MlpModel.from_weights([[[-1.0, -1.0]]], [[-5.0]])
    fd = finite_diff_gradient(m, [1.0, 1.0], [0.5, 0.5], 1)
    assert not fd.gradient.any() and not fd.kink_adjacent


def test_finite_diff_against_one_sided():
    m, zp, zn = _smooth_point(1)
    central = finite_diff_gradient(m, zp, zn, 2, step=1e-5, T=1.0).gradient
    h = 1e-7
    base = quadratic_loss(forward_pass(m, zp).h[2] ** 2, forward_pass(m, zn).h[2] ** 2, 1.0)
    fwd = np.empty_like(central)
    for idx in np.ndindex(central.shape):
        th = [t.copy() for t in m.thetas]
        th[1][idx] += h
        m2 = MlpModel(th)
        fwd[idx] = (quadratic_loss(forward_pass(m2, zp).h[2] ** 2, forward_pass(m2, zn).h[2] ** 2, 1.0) - base) / h
    np.testing.assert_allclose(central, fwd, rtol=1e-4, atol=1e-4)
    cf = layer_gradient(m, 2, forward_pass(m, zp), forward_pass(m, zn), 1.0)
    assert np.max(np.abs(central - cf)) <= 1e-5 * max(1.0, np.max(np.abs(cf)))


def test_finite_diff_second_order_convergence():
    m, zp, zn = _smooth_point(2)
    cf = layer_gradient(m, 2, forward_pass(m, zp), forward_pass(m, zn), 1.0)
    e1 = np.max(np.abs(finite_diff_gradient(m, zp, zn, 2, step=2e-3, T=1.0).gradient - cf))
    e2 = np.max(np.abs(finite_diff_gradient(m, zp, zn, 2, step=1e-3, T=1.0).gradient - cf))
    assert 3.0 < e1 / e2 < 5.0


def test_fast_and_literal_agree():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = init_model([5, 6, 4], seed=int(rng.integers(1000)))
        zp, zn = rng.normal(size=5), rng.normal(size=5)
        for layer in (1, 2):
            a = finite_diff_gradient(m, zp, zn, layer)
            b = fast_finite_diff(m, zp, zn, layer)
            assert a.kink_adjacent == b.kink_adjacent
            if not a.kink_adjacent:
                np.testing.assert_allclose(a.gradient, b.gradient, rtol=1e-5, atol=1e-6)


def test_finite_diff_rejects_bad_step():
    m = init_model([3, 2])
    with pytest.raises(ValueError):
        finite_diff_gradient(m, np.ones(3), np.ones(3), 1, step=0.0)


def test_gradient_check_sweep_small():
    rep = gradient_check_sweep([13, 32, 32], n_points=300, seed=4)
    assert rep.pass_fraction >= 0.99
    assert rep.unflagged_pass_fraction == 1.0


# --- MAC budget -------------------------------------------------------------


def test_mac_budget_bler_dims():
    b = mac_budget([13, 32, 32], 10)
    assert (b.Q, b.N_total) == (1440, 1504)
    assert b.total("bler-predict") == 14400
    assert b.total("cqi-tune") == 23296
    assert b.total("ri-cqi-tune") == 52096
    assert b.N_total > b.Q


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 64), min_size=2, max_size=5), st.integers(2, 20))
def test_mac_budget_formulas(dims, C):
    b = mac_budget(dims, C)
    Q = sum(dims[l] * dims[l - 1] for l in range(1, len(dims)))
    N = Q + sum(dims[1:])
    assert b.totals == {"bler-predict": C * Q, "cqi-tune": (C + 2) * Q + 4 * N, "ri-cqi-tune": (3 * C + 2) * Q + 4 * N}


def test_mac_budget_errors():
    with pytest.raises(ValueError):
        mac_budget([13], 10)
    with pytest.raises(ValueError):
        mac_budget([13, 32], 1)


# --- quadratic vs softplus gap ----------------------------------------------


def test_taylor_gap_center():
    gp, gn = taylor_gap([0.0])
    assert gp[0] == 0.0 and gn[0] == 0.0


def test_taylor_sweep_bounds():
    rep = taylor_gap_sweep(n_points=20001)
    assert rep.max_gap <= 0.02
    assert rep.envelope_holds()
    assert math.isfinite(rep.envelope) and rep.envelope < (8 / 6) * 0.0963


def test_taylor_range_validation():
    with pytest.raises(ValueError):
        taylor_gap_sweep((-3.0, 0.5))


# --- decay monitor ----------------------------------------------------------


def test_decay_all_false():
    rep = decay_monitor([False] * 500)
    assert not rep.prefix_rate.any() and not rep.window_rates.any()
    assert rep.sublinearity_ratio is None


def test_decay_all_true():
    rep = decay_monitor([True] * 500)
    assert np.all(rep.prefix_rate == 1.0) and np.all(rep.window_rates == 1.0)
    assert rep.sublinearity_ratio == 2.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=400), st.integers(0, 50), st.integers(1, 60))
def test_decay_matches_naive_counter(log, start, window):
    start = min(start, len(log) - 1)
    rep = decay_monitor(log, window=window, start=start)
    tail = log[start:]
    for n in (1, len(tail) // 2, len(tail)):
        assert rep.count(n) == sum(tail[:n])
    nwin = len(tail) // window
    if nwin:
        expected = [sum(tail[k * window:(k + 1) * window]) / window for k in range(nwin)]
        np.testing.assert_allclose(rep.window_rates, expected)


def test_decay_empty_log():
    with pytest.raises(ValueError):
        decay_monitor([])
