"""Oracles and bound calculators that check the core independently.

Everything here is a pure function of its arguments. The bound sweeps clip
every neuron's parameter row to norm ``B_theta``; the training and tuning
code itself never clips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ff_core import LOSSES, MlpModel, ShapeError, forward_pass, layer_gradient, quadratic_loss, softplus_loss

# ---------------------------------------------------------------------------
# Bound constants
# ---------------------------------------------------------------------------


@dataclass
class BoundConstants:
    dims: list
    B_z: float
    B_theta: float
    T: float
    B_layers: list  # B_0 = B_z, B_1 .. B_L
    grad_bounds: list = field(default_factory=list)  # per layer 1..L
    loss_bound: float = 0.0
    rho: list = field(default_factory=list)  # per layer 1..L

    @property
    def B_h(self) -> float:
        return max(self.B_layers)

    def lr_admissible(self, alpha_f: float) -> bool:
        """Whether ``alpha_f < 1 / rho_L``."""
        return alpha_f * self.rho[-1] < 1.0


def activation_bound(dims: Sequence[int], B_z: float, B_theta: float) -> BoundConstants:
    """``B_0 = B_z`` and ``B_l = sqrt(M_l) * B_theta * (B_{l-1} + 1)``."""
    B = [float(B_z)]
    for M in dims[1:]:
        B.append(math.sqrt(M) * B_theta * (B[-1] + 1.0))
    return BoundConstants(list(dims), float(B_z), float(B_theta), 0.0, B)


def gradient_bound(B_h: float, T: float, M_l: int) -> float:
    """Per-neuron bound on the layer-loss gradient norm."""
    return 8.0 * (B_h**2 + T + 2.0) * B_h * (B_h + 1.0) / M_l


def loss_bound(B_h: float, T: float) -> float:
    a = B_h**2 + T + 2.0
    return a * a + 4.0 * a


def smoothness_const(B_h: float, T: float, M_l: int) -> float:
    return 8.0 * (3.0 * B_h**2 + T + 2.0) * (B_h + 1.0) ** 2 / M_l


def bound_constants(dims: Sequence[int], B_z: float, B_theta: float, T: float) -> BoundConstants:
    bc = activation_bound(dims, B_z, B_theta)
    bc.T = float(T)
    Bh = bc.B_h
    bc.grad_bounds = [gradient_bound(Bh, T, M) for M in dims[1:]]
    bc.loss_bound = loss_bound(Bh, T)
    bc.rho = [smoothness_const(Bh, T, M) for M in dims[1:]]
    return bc


# ---------------------------------------------------------------------------
# Bounded random models for the never-exceed sweeps
# ---------------------------------------------------------------------------


def clip_rows(theta: np.ndarray, B_theta: float) -> np.ndarray:
    """Scale each row (one neuron's ``[w, b]``) down to norm at most ``B_theta``."""
    norms = np.linalg.norm(theta, axis=1, keepdims=True)
    scale = np.minimum(1.0, B_theta / np.maximum(norms, 1e-300))
    return theta * scale


def _random_rows(rng, shape, B_theta):
    rows = rng.normal(size=shape)
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    # mix of rows on the ball's surface and strictly inside it
    radius = np.where(rng.random((shape[0], 1)) < 0.5, 1.0, rng.random((shape[0], 1)))
    return rows * radius * B_theta


def random_bounded_model(dims: Sequence[int], B_theta: float, rng) -> MlpModel:
    thetas = [_random_rows(rng, (dims[l], dims[l - 1] + 1), B_theta) for l in range(1, len(dims))]
    # a positive bias shift keeps more units active, which stresses the bounds
    for th in thetas:
        th[:, -1] = np.abs(th[:, -1])
    return MlpModel([clip_rows(th, B_theta) for th in thetas])


def random_bounded_input(d: int, B_z: float, rng) -> np.ndarray:
    z = rng.normal(size=d)
    return z / np.linalg.norm(z) * B_z * rng.uniform(0.5, 1.0)


@dataclass
class LemmaReport:
    samples: int
    max_ratio: dict
    violations: dict

    @property
    def total_violations(self) -> int:
        return int(sum(self.violations.values()))


def lemma_sweep(dims: Sequence[int], B_z: float, B_theta: float, T: float, n_samples: int = 10_000,
                n_pairs: int = 1_000, seed: int = 0, update_lr: float = 0.05) -> LemmaReport:
    """Never-exceed check of the activation, gradient, loss and smoothness bounds.

    Half of the models are fresh random draws; the other half come from one
    clipped gradient step on a random draw, so post-update parameters are
    covered too. Ratios are ``measured / bound``.
    """
    bc = bound_constants(dims, B_z, B_theta, T)
    rng = np.random.default_rng(seed)
    ratio = {"activation": 0.0, "gradient": 0.0, "loss": 0.0, "smoothness": 0.0}
    viol = dict.fromkeys(ratio, 0)
    L = len(dims) - 1

    def note(key, r):
        ratio[key] = max(ratio[key], r)
        if r > 1.0:
            viol[key] += 1

    for k in range(n_samples):
        model = random_bounded_model(dims, B_theta, rng)
        z_pos = random_bounded_input(dims[0], B_z, rng)
        z_neg = random_bounded_input(dims[0], B_z, rng)
        if k % 2:
            model = _clipped_step(model, z_pos, z_neg, T, update_lr, B_theta)
        a_pos, a_neg = forward_pass(model, z_pos), forward_pass(model, z_neg)
        for l in range(1, L + 1):
            for acts in (a_pos, a_neg):
                note("activation", float(np.linalg.norm(acts.h[l])) / bc.B_layers[l])
            grad = layer_gradient(model, l, a_pos, a_neg, T)
            note("gradient", float(np.max(np.linalg.norm(grad, axis=1))) / bc.grad_bounds[l - 1])
            g_pos, g_neg = a_pos.h[l] ** 2, a_neg.h[l] ** 2
            note("loss", abs(quadratic_loss(g_pos, g_neg, T)) / bc.loss_bound)

    for _ in range(n_pairs):
        l = int(rng.integers(1, L + 1))
        shape = (dims[l], dims[l - 1] + 1)
        # inputs to layer l with norm up to B_h, as in the proof
        h_pos = np.abs(rng.normal(size=dims[l - 1]))
        h_neg = np.abs(rng.normal(size=dims[l - 1]))
        h_pos *= bc.B_layers[l - 1] * rng.uniform(0.1, 1.0) / np.linalg.norm(h_pos)
        h_neg *= bc.B_layers[l - 1] * rng.uniform(0.1, 1.0) / np.linalg.norm(h_neg)
        th1 = _random_rows(rng, shape, B_theta)
        th2 = clip_rows(th1 + rng.normal(size=shape) * B_theta * 10.0 ** rng.uniform(-4, 0), B_theta)
        g1 = _single_layer_grad(th1, h_pos, h_neg, T)
        g2 = _single_layer_grad(th2, h_pos, h_neg, T)
        dtheta = np.linalg.norm(th1 - th2)
        if dtheta > 0:
            note("smoothness", float(np.linalg.norm(g1 - g2)) / (bc.rho[l - 1] * dtheta))
    return LemmaReport(n_samples, ratio, viol)


def _single_layer_grad(theta, h_in_pos, h_in_neg, T, loss="quadratic"):
    zp, zn = np.append(h_in_pos, 1.0), np.append(h_in_neg, 1.0)
    op, on = np.maximum(theta @ zp, 0.0), np.maximum(theta @ zn, 0.0)
    a_pos, a_neg = LOSSES[loss](op, on, T)
    return np.outer(a_pos, zp) + np.outer(a_neg, zn)


def _clipped_step(model, z_pos, z_neg, T, lr, B_theta):
    a_pos, a_neg = forward_pass(model, z_pos), forward_pass(model, z_neg)
    new = []
    for l, th in enumerate(model.thetas, start=1):
        g = layer_gradient(model, l, a_pos, a_neg, T)
        new.append(clip_rows(th - lr * np.sign(g), B_theta))
    return MlpModel(new)


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------


@dataclass
class FiniteDiffResult:
    gradient: np.ndarray
    kink_adjacent: bool
    margin: float


def _layer_objective(model: MlpModel, layer: int, z_pos, z_neg, T, loss):
    a_pos, a_neg = forward_pass(model, z_pos), forward_pass(model, z_neg)
    fn = quadratic_loss if loss == "quadratic" else softplus_loss
    return fn(a_pos.h[layer] ** 2, a_neg.h[layer] ** 2, T)


def kink_margin(model: MlpModel, z_pos, z_neg, layer: int) -> float:
    """Smallest ``|p_l[j]|`` divided by the largest input magnitude to layer ``l``.

    Perturbing one parameter by ``s`` moves a pre-activation by at most
    ``s * max|h~_{l-1}|``, so the central difference stays inside one linear
    piece when this margin exceeds ``s``.
    """
    out = math.inf
    for z in (z_pos, z_neg):
        a = forward_pass(model, z)
        scale = max(1.0, float(np.max(np.abs(a.h[layer - 1]))))
        out = min(out, float(np.min(np.abs(a.p[layer - 1]))) / scale)
    return out


def finite_diff_gradient(model: MlpModel, z_pos, z_neg, layer: int, step: float = 1e-5, T: float = 9.0,
                         loss: str = "quadratic") -> FiniteDiffResult:
    """Central differences of the layer loss, one parameter at a time.

    This literal version re-runs the forward pass for every perturbation. It
    flags the point when any pre-activation lies within ``10 * step`` (scaled
    by the input magnitude) of the ReLU kink.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    if not 1 <= layer <= model.num_layers:
        raise ShapeError(f"layer index {layer} outside 1..{model.num_layers}")
    base = model.thetas[layer - 1]
    grad = np.empty_like(base)
    for idx in np.ndindex(base.shape):
        vals = []
        for sgn in (1.0, -1.0):
            thetas = [t.copy() for t in model.thetas]
            thetas[layer - 1][idx] += sgn * step
            vals.append(_layer_objective(MlpModel(thetas), layer, z_pos, z_neg, T, loss))
        grad[idx] = (vals[0] - vals[1]) / (2.0 * step)
    margin = kink_margin(model, z_pos, z_neg, layer)
    return FiniteDiffResult(grad, margin <= 10.0 * step, margin)


def fast_finite_diff(model: MlpModel, z_pos, z_neg, layer: int, step: float = 1e-5, T: float = 9.0,
                     loss: str = "quadratic") -> FiniteDiffResult:
    """Same central differences, evaluated neuron by neuron.

    Parameter ``(j, k)`` only enters neuron ``j``'s term of the layer loss,
    so the difference of the full loss equals the difference of that term.
    Evaluating the term alone avoids cancellation against the other
    neurons and vectorises over all parameters.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    M = model.dims[layer]
    a_pos, a_neg = forward_pass(model, z_pos), forward_pass(model, z_neg)

    def term(p, positive):
        g = np.maximum(p, 0.0) ** 2 - T
        if loss == "quadratic":
            return (g * g - 4.0 * g) / M if positive else (g * g + 4.0 * g) / M
        u = -g if positive else g
        return (np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))) / M

    grad = np.zeros_like(model.thetas[layer - 1])
    for acts, positive in ((a_pos, True), (a_neg, False)):
        h_in = np.append(acts.h[layer - 1], 1.0)
        p = acts.p[layer - 1][:, None]
        d = step * h_in[None, :]
        grad += (term(p + d, positive) - term(p - d, positive)) / (2.0 * step)
    margin = kink_margin(model, z_pos, z_neg, layer)
    return FiniteDiffResult(grad, margin <= 10.0 * step, margin)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / denom


@dataclass
class GradientCheckReport:
    points: int
    passed: int
    flagged: int
    passed_unflagged: int
    worst_unflagged: float

    @property
    def pass_fraction(self) -> float:
        return self.passed / self.points

    @property
    def unflagged_pass_fraction(self) -> float:
        n = self.points - self.flagged
        return self.passed_unflagged / n if n else 1.0


def gradient_check_sweep(dims: Sequence[int], n_points: int = 10_000, step: float = 1e-5, T: float = 9.0,
                         tol: float = 1e-5, seed: int = 0, loss: str = "quadratic") -> GradientCheckReport:
    """Closed-form layer gradients against central differences at random points.

    Parameters come from the usual fan-in initialisation with a small random
    bias; each point uses a random layer.
    """
    from .ff_core import init_model

    rng = np.random.default_rng(seed)
    passed = flagged = passed_unflagged = 0
    worst = 0.0
    L = len(dims) - 1
    for k in range(n_points):
        model = init_model(dims, seed=int(rng.integers(2**31)))
        thetas = [t.copy() for t in model.thetas]
        for th in thetas:
            th[:, -1] = rng.normal(scale=0.1, size=th.shape[0])
        model = MlpModel(thetas)
        z_pos = rng.normal(size=dims[0])
        z_neg = z_pos.copy()
        z_neg[-1] = rng.normal()
        layer = int(rng.integers(1, L + 1))
        fd = fast_finite_diff(model, z_pos, z_neg, layer, step, T, loss)
        cf = layer_gradient(model, layer, forward_pass(model, z_pos), forward_pass(model, z_neg), T, loss)
        err = relative_error(fd.gradient, cf)
        ok = err <= tol
        passed += ok
        if fd.kink_adjacent:
            flagged += 1
        else:
            passed_unflagged += ok
            worst = max(worst, err)
    return GradientCheckReport(n_points, passed, flagged, passed_unflagged, worst)


# ---------------------------------------------------------------------------
# MAC accounting
# ---------------------------------------------------------------------------

MAC_ALGORITHMS = ("bler-predict", "cqi-tune", "ri-cqi-tune")


@dataclass
class MacBudget:
    dims: list
    C: int
    Q: int
    N_total: int
    totals: dict

    def total(self, algorithm: str) -> int:
        return self.totals[algorithm]


def mac_budget(dims: Sequence[int], C: int) -> MacBudget:
    """Worst-case multiply-accumulates per CSI-RS period for each algorithm."""
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise ValueError("dims must list at least two positive widths")
    if C < 2:
        raise ValueError("C must be >= 2")
    Q = sum(dims[l] * dims[l - 1] for l in range(1, len(dims)))
    N = sum(dims[l] * (dims[l - 1] + 1) for l in range(1, len(dims)))
    totals = {
        "bler-predict": C * Q,
        "cqi-tune": (C + 2) * Q + 4 * N,
        "ri-cqi-tune": (3 * C + 2) * Q + 4 * N,
    }
    return MacBudget(list(dims), C, Q, N, totals)


# ---------------------------------------------------------------------------
# Quadratic vs softplus gap
# ---------------------------------------------------------------------------


@dataclass
class TaylorReport:
    x: np.ndarray
    gap_pos: np.ndarray
    gap_neg: np.ndarray
    max_gap: float
    exponent: float
    envelope: float  # max of gap / |x|^3

    def envelope_holds(self, tol: float = 1e-12) -> bool:
        """Whether ``gap <= (8/6) * 0.0963 * |x|^3`` plus float slack on the grid."""
        bound = (8.0 / 6.0) * 0.0963 * np.abs(self.x) ** 3 + tol
        return bool(np.all(self.gap_pos <= bound) and np.all(self.gap_neg <= bound))


def taylor_gap(x) -> tuple[np.ndarray, np.ndarray]:
    """Gaps between the quadratic terms and eight times the shifted softplus terms."""
    x = np.asarray(x, dtype=float)
    ln2 = math.log(2.0)
    sp_neg = np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x)))  # ln(1 + e^-x)
    sp_pos = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))  # ln(1 + e^x)
    gap_pos = np.abs((x * x - 4.0 * x) - 8.0 * (sp_neg - ln2))
    gap_neg = np.abs((x * x + 4.0 * x) - 8.0 * (sp_pos - ln2))
    return gap_pos, gap_neg


def taylor_gap_sweep(x_range=(-0.5, 0.5), n_points: int = 100_001, fit_range=(0.05, 0.5)) -> TaylorReport:
    """Dense sweep of the gap and a log-log power-law fit of its decay."""
    lo, hi = x_range
    if lo < -2.0 or hi > 2.0 or lo >= hi:
        raise ValueError("x_range must lie within [-2, 2]")
    x = np.linspace(lo, hi, n_points)
    gp, gn = taylor_gap(x)
    mask = (np.abs(x) >= fit_range[0]) & (np.abs(x) <= fit_range[1])
    g = np.maximum(gp, gn)[mask]
    exponent = float(np.polyfit(np.log(np.abs(x[mask])), np.log(g), 1)[0]) if mask.sum() > 2 else float("nan")
    nz = x != 0
    env = float(np.max(np.maximum(gp, gn)[nz] / np.abs(x[nz]) ** 3)) if nz.any() else 0.0
    return TaylorReport(x, gp, gn, float(max(gp.max(), gn.max())), exponent, env)


# ---------------------------------------------------------------------------
# Trigger-rate decay
# ---------------------------------------------------------------------------


@dataclass
class DecayReport:
    prefix_rate: np.ndarray  # (1/N) sum_{t<=N} I_t
    window_rates: np.ndarray
    cumulative: np.ndarray
    window: int
    start: int

    def count(self, n: int) -> int:
        """Triggers among the first ``n`` periods after ``start``."""
        if n <= 0:
            return 0
        return int(self.cumulative[min(n, self.cumulative.shape[0]) - 1])

    @property
    def sublinearity_ratio(self) -> Optional[float]:
        """``count(2N) / count(N)`` with ``2N`` the largest even prefix; None if no triggers."""
        n = self.cumulative.shape[0] // 2
        c = self.count(n)
        return None if c == 0 else self.count(2 * n) / c

    @property
    def first_window(self) -> float:
        return float(self.window_rates[0]) if self.window_rates.size else 0.0

    @property
    def final_window(self) -> float:
        return float(self.window_rates[-1]) if self.window_rates.size else 0.0


def decay_monitor(log: Sequence[bool], window: int = 100, start: int = 0) -> DecayReport:
    """Prefix trigger rate, non-overlapping window rates and cumulative counts.

    ``start`` drops the periods before it (for example the pre-shift part of
    a run) so every statistic counts from the first post-shift period.
    """
    arr = np.asarray(log, dtype=bool)[start:]
    if arr.size == 0:
        raise ValueError("trigger log is empty")
    cum = np.cumsum(arr, dtype=np.int64)
    prefix = cum / np.arange(1, arr.size + 1)
    nwin = arr.size // window
    rates = arr[: nwin * window].reshape(nwin, window).mean(axis=1) if nwin else np.array([arr.mean()])
    return DecayReport(prefix, rates, cum, window, start)
