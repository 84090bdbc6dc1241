"""Synthetic link environment: SNR trajectories, noisy UE observables and
Bernoulli ACK/NACK feedback drawn from a logistic SINR-to-BLER family.

The channel is summarised per CSI-RS period by a wideband SNR (large-scale
trajectory plus AR(1) fading in dB). The PDSCH transmissions of a period see
that SNR plus a channel-aging term whose spread grows with Doppler. Per-layer
SINR for rank ``r`` subtracts the power split, an antenna-correlation penalty
and a fixed profile degradation, then saturates at an impairment ceiling.

Everything that depends only on the channel (not on the rank/CQI decision)
is drawn up front from the scenario seed, so different link-adaptation
algorithms replayed on the same seed see the same channel and the same
per-transmission uniforms (common random numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Iterator, Optional

import numpy as np

from .link_adapt import CqiTable, LinkFeatures, PeriodOutcome, empirical_bler, throughput

CORRELATION_PENALTY_DB = {"low": 0.5, "medium": 2.0, "high": 4.0}
SNR_KINDS = ("constant", "ramp", "levels", "piecewise")


class ConfigError(ValueError):
    pass


class EndOfStream(StopIteration):
    pass


@dataclass(frozen=True)
class ChannelParams:
    """Parameters that a shift schedule may override."""

    snr_kind: str = "levels"
    snr_low: float = 0.0
    snr_high: float = 12.0
    snr_dwell: int = 25
    snr_points: str = ""
    fading_std_db: float = 1.0
    doppler_hz: float = 10.0
    delay_spread_ns: float = 30.0
    correlation: str = "low"
    aging_db_per_sqrt_hz: float = 0.15
    doppler_loss_db_per_hz: float = 0.01
    delay_loss_db_per_100ns: float = 0.5
    # stale precoder: extra loss per additional layer, proportional to Doppler
    layer_aging_db_per_hz: float = 0.0
    sinr_cap_db: float = 28.0
    bler_mid0_db: float = -9.0
    cqi_step_db: float = 1.9
    rank_step_db: float = 0.5
    bler_slope: float = 1.0

    def validate(self):
        if self.snr_kind not in SNR_KINDS:
            raise ConfigError(f"snr_kind must be one of {SNR_KINDS}")
        if self.correlation not in CORRELATION_PENALTY_DB:
            raise ConfigError(f"correlation must be one of {sorted(CORRELATION_PENALTY_DB)}")
        if not self.bler_slope > 0:
            raise ConfigError("bler_slope must be > 0")
        if self.snr_dwell < 1:
            raise ConfigError("snr_dwell must be >= 1")
        if self.fading_std_db < 0 or self.aging_db_per_sqrt_hz < 0 or self.layer_aging_db_per_hz < 0:
            raise ConfigError("noise spreads must be >= 0")
        if self.snr_kind == "piecewise":
            parse_points(self.snr_points)

    @property
    def corr_penalty_db(self) -> float:
        return CORRELATION_PENALTY_DB[self.correlation]


@dataclass(frozen=True)
class ShiftEntry:
    period: int
    overrides: dict

    def __post_init__(self):
        names = {f.name for f in fields(ChannelParams)}
        bad = set(self.overrides) - names
        if bad:
            raise ConfigError(f"unknown override keys {sorted(bad)}")


@dataclass
class ScenarioSpec:
    name: str = "custom"
    duration: int = 1000
    csi_rs_period_ms: int = 80
    tx_per_period: int = 50
    meas_noise_db: float = 0.5
    pdsch_noise_db: float = 0.5
    jitter_frac: float = 0.1
    n_rbs: int = 52
    n_dmrs_symbols: int = 2
    symbols_per_tx: int = 12
    r_max: int = 4
    seed: int = 0
    channel: ChannelParams = field(default_factory=ChannelParams)
    shift_schedule: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.duration < 1:
            raise ConfigError("duration must be >= 1")
        if self.tx_per_period < 1:
            raise ConfigError("tx_per_period must be >= 1")
        if self.csi_rs_period_ms not in (10, 40, 80):
            raise ConfigError("csi_rs_period_ms must be 10, 40 or 80")
        if not 1 <= self.r_max <= 4:
            raise ConfigError("r_max must be in 1..4")
        self.channel.validate()
        periods = [s.period for s in self.shift_schedule]
        if periods != sorted(periods):
            raise ConfigError("shift schedule must be sorted by period")
        if len(set(periods)) != len(periods):
            raise ConfigError("overlapping shift schedule entries")
        for s in self.shift_schedule:
            replace(self.channel, **s.overrides).validate()

    @property
    def shift_periods(self) -> list[int]:
        return [s.period for s in self.shift_schedule]

    def with_seed(self, seed: int) -> "ScenarioSpec":
        return replace(self, seed=seed)


def parse_points(text: str) -> list[tuple[int, float]]:
    """``"0:5,100:20"`` -> ``[(0, 5.0), (100, 20.0)]`` (period:dB breakpoints)."""
    pts = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        try:
            p, v = item.split(":")
            pts.append((int(p), float(v)))
        except ValueError as exc:
            raise ConfigError(f"bad snr point {item!r}") from exc
    if not pts or pts[0][0] != 0:
        raise ConfigError("piecewise snr_points must start at period 0")
    return pts


def apply_shift(scenario: ScenarioSpec, period: int) -> ChannelParams:
    """Channel parameters in effect at ``period`` (piecewise-constant overrides)."""
    params = scenario.channel
    for entry in scenario.shift_schedule:
        if entry.period <= period:
            params = replace(params, **entry.overrides)
        else:
            break
    return params


def _segments(scenario: ScenarioSpec) -> list[tuple[int, int, ChannelParams]]:
    bounds = [0] + [p for p in scenario.shift_periods if 0 < p < scenario.duration] + [scenario.duration]
    return [(a, b, apply_shift(scenario, a)) for a, b in zip(bounds, bounds[1:]) if b > a]


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


def layer_sinr(snr_db: float, rank: int, params: ChannelParams) -> float:
    """True per-layer SINR in dB for a PDSCH at wideband SNR ``snr_db``."""
    raw = snr_db - 10.0 * math.log10(rank) - params.corr_penalty_db * (rank - 1)
    raw -= params.doppler_loss_db_per_hz * params.doppler_hz + params.delay_loss_db_per_100ns * params.delay_spread_ns / 100.0
    raw -= params.layer_aging_db_per_hz * params.doppler_hz * (rank - 1)
    return -10.0 * math.log10(10.0 ** (-raw / 10.0) + 10.0 ** (-params.sinr_cap_db / 10.0))


def bler_midpoint(cqi: int, rank: int, params: ChannelParams) -> float:
    return params.bler_mid0_db + params.cqi_step_db * (cqi - 1) + params.rank_step_db * (rank - 1)


def logistic_bler(sinr_db: float, cqi: int, rank: int, params: ChannelParams) -> float:
    u = -params.bler_slope * (sinr_db - bler_midpoint(cqi, rank, params))
    # expit, split by sign to avoid overflow
    if u >= 0:
        return 1.0 / (1.0 + math.exp(-u))
    e = math.exp(u)
    return e / (1.0 + e)


@dataclass(frozen=True)
class ChannelState:
    period: int
    pdsch_snr_db: float
    params: ChannelParams


def true_bler(state: ChannelState, rank: int, cqi: int) -> float:
    if not 1 <= cqi <= 15 or rank < 1:
        raise ValueError(f"invalid decision rank={rank} cqi={cqi}")
    return logistic_bler(layer_sinr(state.pdsch_snr_db, rank, state.params), cqi, rank, state.params)


# ---------------------------------------------------------------------------
# Stream generation
# ---------------------------------------------------------------------------


@dataclass
class ChannelTrace:
    """Pre-drawn exogenous randomness for a whole scenario run."""

    snr_mean: np.ndarray
    snr_true: np.ndarray
    pdsch_snr: np.ndarray
    csi_snr_meas: np.ndarray
    pdsch_snr_meas: np.ndarray
    doppler_est: np.ndarray
    delay_est: np.ndarray
    uniforms: np.ndarray
    params: list


def _snr_mean(params: ChannelParams, start: int, stop: int, duration: int, rng: np.random.Generator) -> np.ndarray:
    n = stop - start
    if params.snr_kind == "constant":
        return np.full(n, params.snr_low)
    if params.snr_kind == "ramp":
        t = np.arange(start, stop)
        return params.snr_low + (params.snr_high - params.snr_low) * t / max(duration - 1, 1)
    if params.snr_kind == "piecewise":
        pts = parse_points(params.snr_points)
        t = np.arange(start, stop)
        return np.interp(t, [p for p, _ in pts], [v for _, v in pts])
    n_blocks = -(-n // params.snr_dwell)
    levels = rng.uniform(params.snr_low, params.snr_high, size=n_blocks)
    return np.repeat(levels, params.snr_dwell)[:n]


def generate_trace(scenario: ScenarioSpec) -> ChannelTrace:
    ss = np.random.SeedSequence(scenario.seed)
    rng_traj, rng_fade, rng_obs, rng_tx = (np.random.default_rng(s) for s in ss.spawn(4))
    n = scenario.duration
    snr_mean = np.empty(n)
    fade_std = np.empty(n)
    rho = np.empty(n)
    age_std = np.empty(n)
    doppler = np.empty(n)
    delay = np.empty(n)
    params_per_period = [None] * n
    for a, b, params in _segments(scenario):
        snr_mean[a:b] = _snr_mean(params, a, b, n, rng_traj)
        fade_std[a:b] = params.fading_std_db
        rho[a:b] = math.exp(-params.doppler_hz * scenario.csi_rs_period_ms / 1000.0)
        age_std[a:b] = params.aging_db_per_sqrt_hz * math.sqrt(params.doppler_hz)
        doppler[a:b] = params.doppler_hz
        delay[a:b] = params.delay_spread_ns
        params_per_period[a:b] = [params] * (b - a)
    w = rng_fade.standard_normal(n)
    fade = np.empty(n)
    f = w[0] * fade_std[0]
    for t in range(n):
        if t > 0:
            f = rho[t] * f + math.sqrt(1.0 - rho[t] ** 2) * fade_std[t] * w[t]
        fade[t] = f
    snr_true = snr_mean + fade
    pdsch = snr_true + age_std * rng_fade.standard_normal(n)
    csi_meas = snr_true + scenario.meas_noise_db * rng_obs.standard_normal(n)
    pdsch_meas = pdsch + scenario.pdsch_noise_db * rng_obs.standard_normal(n)
    jit = scenario.jitter_frac
    doppler_est = doppler * (1.0 + jit * rng_obs.standard_normal(n))
    delay_est = delay * (1.0 + jit * rng_obs.standard_normal(n))
    uniforms = rng_tx.random((n, scenario.tx_per_period))
    return ChannelTrace(snr_mean, snr_true, pdsch, csi_meas, pdsch_meas, doppler_est, delay_est, uniforms, params_per_period)


def csi_capacity(csi_snr_db: float, r_max: int, corr_penalty_db: float) -> float:
    """Rank-capped Shannon capacity proxy (bits/s/Hz) with a correlation penalty."""
    best = 0.0
    for r in range(1, r_max + 1):
        sinr = csi_snr_db - 10.0 * math.log10(r) - corr_penalty_db * (r - 1)
        best = max(best, r * math.log2(1.0 + 10.0 ** (sinr / 10.0)))
    return best


class LinkEnvironment:
    """Replayable environment for one scenario and seed.

    Predictors only ever see :meth:`features` and :meth:`transmit` results; the
    :class:`ChannelState` is kept private to the environment.
    """

    def __init__(self, scenario: ScenarioSpec, table: Optional[CqiTable] = None):
        self.scenario = scenario
        self.table = table if table is not None else CqiTable.standard()
        self._trace = generate_trace(scenario)

    def __len__(self) -> int:
        return self.scenario.duration

    def _check(self, period: int):
        if not 0 <= period < self.scenario.duration:
            raise EndOfStream(f"period {period} outside scenario of {self.scenario.duration} periods")

    def features(self, period: int, rank: int = 1, cqi: int = 1) -> LinkFeatures:
        self._check(period)
        tr = self._trace
        hist = []
        for k in (1, 2, 3):
            # warm-up: before the first period repeat the earliest observation
            hist.append(float(tr.pdsch_snr_meas[max(period - k, 0)]))
        return LinkFeatures(
            csi_rs_snr=float(tr.csi_snr_meas[period]),
            csi_rs_capacity=csi_capacity(float(tr.csi_snr_meas[period]), self.scenario.r_max, tr.params[period].corr_penalty_db),
            delay_spread_est=float(tr.delay_est[period]),
            doppler_est=float(tr.doppler_est[period]),
            pdsch_snr_now=float(tr.pdsch_snr_meas[period]),
            pdsch_snr_hist=tuple(hist),
            ri=rank,
            cqi=cqi,
            n_rbs=self.scenario.n_rbs,
            n_dmrs_symbols=self.scenario.n_dmrs_symbols,
        )

    def csi_snr(self, period: int) -> float:
        """CSI-RS SNR estimate used by the table-based baseline."""
        self._check(period)
        return float(self._trace.csi_snr_meas[period])

    def snr_mean(self, period: int) -> float:
        """Large-scale SNR of the trajectory (for segmenting reports)."""
        self._check(period)
        return float(self._trace.snr_mean[period])

    def _state(self, period: int) -> ChannelState:
        self._check(period)
        return ChannelState(period, float(self._trace.pdsch_snr[period]), self._trace.params[period])

    def true_bler(self, period: int, rank: int, cqi: int) -> float:
        return true_bler(self._state(period), rank, cqi)

    def transmit(self, period: int, rank: int, cqi: int) -> PeriodOutcome:
        return simulate_period(self.scenario, self._state(period), rank, cqi, self._trace.uniforms[period], self.table)

    def periods(self) -> Iterator[int]:
        return iter(range(self.scenario.duration))


def simulate_period(
    scenario: ScenarioSpec,
    state: ChannelState,
    rank: int,
    cqi: int,
    uniforms: Optional[np.ndarray] = None,
    table: Optional[CqiTable] = None,
    rng: Optional[np.random.Generator] = None,
) -> PeriodOutcome:
    """Draw ``tx_per_period`` NACK indicators with probability ``true_bler``.

    ``uniforms`` supplies the per-transmission uniforms (NACK iff ``u < p``);
    otherwise they are drawn from ``rng``.
    """
    p = true_bler(state, rank, cqi)
    if uniforms is None:
        rng = rng if rng is not None else np.random.default_rng(scenario.seed)
        uniforms = rng.random(scenario.tx_per_period)
    n_nack = int(np.count_nonzero(uniforms < p))
    n_ack = len(uniforms) - n_nack
    table = table if table is not None else CqiTable.standard()
    bits = throughput(n_ack, n_nack, rank, cqi, table, scenario.n_rbs, scenario.symbols_per_tx * len(uniforms))
    return PeriodOutcome(n_ack, n_nack, empirical_bler(n_ack, n_nack), bits)


def gen_features(scenario: ScenarioSpec, period: int, env: Optional[LinkEnvironment] = None) -> LinkFeatures:
    env = env if env is not None else LinkEnvironment(scenario)
    return env.features(period)


def overrides_from_text(items: dict[str, str]) -> dict[str, Any]:
    """Coerce string override values to the field types of :class:`ChannelParams`."""
    types = {f.name: f.type for f in fields(ChannelParams)}
    out = {}
    for k, v in items.items():
        if k not in types:
            raise ConfigError(f"unknown channel key {k!r}")
        t = types[k]
        try:
            out[k] = int(v) if t in ("int", int) else float(v) if t in ("float", float) else str(v)
        except ValueError as exc:
            raise ConfigError(f"bad value {v!r} for {k}") from exc
    return out
