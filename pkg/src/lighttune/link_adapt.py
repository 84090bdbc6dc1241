"""Link adaptation on top of an FF BLER predictor.

* ``bler_predict``: goodness argmax over the quantized BLER classes.
* ``cqi_tune``: one-period CQI back-off from the table/OLLA choice, followed by
  a LightTune update from the period's ACK/NACK feedback.
* ``ri_cqi_tune``: the same back-off run for a window of up to three ranks,
  keeping the rank/CQI pair with the highest estimated spectral efficiency.
* OLLA: classic additive offset driven by ACK/NACK feedback, used both as the
  baseline and as the source of the table CQI the tuners start from.

Inference and fine-tuning costs are tallied in multiply-accumulates (MACs):
one forward pass costs ``sum_l M_l * M_{l-1}``, a BLER prediction costs one
forward pass per class, and a triggered update costs two forward passes plus
``4 * n_params`` for the gradients and the parameter update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .ff_core import BLER_CLASSES, InputError, LabelSet, MlpModel, goodness, predict_label
from .finetune import FineTuneConfig, FineTuneState, lighttune_step

N_FEATURES = 12


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkFeatures:
    csi_rs_snr: float
    csi_rs_capacity: float
    delay_spread_est: float
    doppler_est: float
    pdsch_snr_now: float
    pdsch_snr_hist: tuple
    ri: int
    cqi: int
    n_rbs: int
    n_dmrs_symbols: int

    def __post_init__(self):
        if len(self.pdsch_snr_hist) != 3:
            raise InputError("pdsch_snr_hist needs exactly 3 values")
        if not 1 <= int(self.cqi) <= 15:
            raise InputError(f"cqi {self.cqi} outside 1..15")
        if int(self.ri) < 1:
            raise InputError(f"ri {self.ri} must be >= 1")
        if self.n_rbs <= 0 or self.n_dmrs_symbols <= 0:
            raise InputError("n_rbs and n_dmrs_symbols must be > 0")

    NAMES = (
        "csi_rs_snr",
        "csi_rs_capacity",
        "delay_spread_est",
        "doppler_est",
        "pdsch_snr_now",
        "pdsch_snr_hist_1",
        "pdsch_snr_hist_2",
        "pdsch_snr_hist_3",
        "ri",
        "cqi",
        "n_rbs",
        "n_dmrs_symbols",
    )

    def to_vector(self) -> np.ndarray:
        return np.array(
            [
                self.csi_rs_snr,
                self.csi_rs_capacity,
                self.delay_spread_est,
                self.doppler_est,
                self.pdsch_snr_now,
                *self.pdsch_snr_hist,
                self.ri,
                self.cqi,
                self.n_rbs,
                self.n_dmrs_symbols,
            ],
            dtype=float,
        )

    def with_cqi(self, cqi: int) -> "LinkFeatures":
        return replace(self, cqi=int(cqi))

    def with_rank(self, rank: int) -> "LinkFeatures":
        return replace(self, ri=int(rank))


@dataclass(frozen=True)
class CqiTable:
    """Per-CQI modulation order and code rate; SE = Qm * R bits per symbol per layer."""

    qm: tuple
    rate: tuple

    def __post_init__(self):
        if len(self.qm) != 15 or len(self.rate) != 15:
            raise InputError("CQI table needs 15 rows")
        se = self.se_values()
        if any(b <= a for a, b in zip(se, se[1:])):
            raise InputError("spectral efficiency must be strictly increasing in CQI")

    def se_values(self) -> list[float]:
        return [q * r for q, r in zip(self.qm, self.rate)]

    def se(self, cqi: int) -> float:
        if not 1 <= cqi <= 15:
            raise InputError(f"cqi {cqi} outside 1..15")
        return self.qm[cqi - 1] * self.rate[cqi - 1]

    @classmethod
    def standard(cls) -> "CqiTable":
        from .data_io import load_cqi_table

        return load_cqi_table()


@dataclass
class OllaState:
    offset: float = 0.0
    step_up: float = 0.1
    target: float = 0.1
    # clamp on |offset| in dB; stops wind-up when even CQI 1 misses the target
    bound: float = 10.0

    @property
    def step_down(self) -> float:
        # zero expected drift when the NACK rate equals the target
        return self.step_up * self.target / (1.0 - self.target)


@dataclass(frozen=True)
class PeriodOutcome:
    n_ack: int
    n_nack: int
    empirical_bler: Optional[float]
    throughput: float


# ---------------------------------------------------------------------------
# Basic measurements
# ---------------------------------------------------------------------------


class EmptyPeriodError(ValueError):
    """No PDSCH was scheduled in the period; BLER is undefined."""


def empirical_bler(n_ack: int, n_nack: int) -> float:
    if n_ack < 0 or n_nack < 0:
        raise InputError("counts must be >= 0")
    if n_ack + n_nack == 0:
        raise EmptyPeriodError("no transmissions in period")
    return n_nack / (n_ack + n_nack)


def prediction_error(p_hat: float, p: float) -> float:
    if not (0.0 <= p_hat <= 1.0 and 0.0 <= p <= 1.0):
        raise InputError("BLER values must lie in [0, 1]")
    return abs(p_hat - p)


def throughput(n_ack: int, n_nack: int, rank: int, cqi: int, table: CqiTable, n_rbs: int, symbols_per_period: int) -> float:
    """ACK fraction times the ideal period payload in bits (12 subcarriers per RB)."""
    total = n_ack + n_nack
    if total == 0:
        return 0.0
    return (n_ack / total) * rank * table.se(cqi) * n_rbs * 12 * symbols_per_period


def fa_md_rates(log: Sequence[tuple[float, float]], tau_bler: float) -> tuple[Optional[float], Optional[float]]:
    """False-alarm and missed-detection rates of ``(p_hat, p)`` pairs at ``tau_bler``.

    A rate whose conditioning event never occurs is returned as ``None``.
    """
    if len(log) == 0:
        raise InputError("empty prediction log")
    arr = np.asarray(log, dtype=float)
    p_hat, p = arr[:, 0], arr[:, 1]
    below = p < tau_bler
    above = ~below
    fa = float(np.count_nonzero((p_hat >= tau_bler) & below) / np.count_nonzero(below)) if below.any() else None
    md = float(np.count_nonzero((p_hat < tau_bler) & above) / np.count_nonzero(above)) if above.any() else None
    return fa, md


# ---------------------------------------------------------------------------
# Predictor plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureNormalizer:
    """Per-feature affine map ``(v - offset) / scale`` applied before the label is appended."""

    offset: tuple
    scale: tuple

    def __post_init__(self):
        if len(self.offset) != len(self.scale):
            raise InputError("offset and scale lengths differ")
        if any(not s > 0 for s in self.scale):
            raise InputError("scales must be > 0")

    @classmethod
    def identity(cls, n: int = N_FEATURES) -> "FeatureNormalizer":
        return cls((0.0,) * n, (1.0,) * n)

    @classmethod
    def fit(cls, X: np.ndarray) -> "FeatureNormalizer":
        X = np.asarray(X, dtype=float)
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        return cls(tuple(float(v) for v in mu), tuple(float(v) for v in sd))

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return (np.asarray(v, dtype=float) - np.asarray(self.offset)) / np.asarray(self.scale)


def feature_vector(features: Union[LinkFeatures, np.ndarray], normalizer: Optional[FeatureNormalizer]) -> np.ndarray:
    v = features.to_vector() if isinstance(features, LinkFeatures) else np.asarray(features, dtype=float)
    return normalizer(v) if normalizer is not None else v


def forward_macs(model: MlpModel) -> int:
    d = model.dims
    return sum(d[l] * d[l - 1] for l in range(1, len(d)))


def param_count(model: MlpModel) -> int:
    d = model.dims
    return sum(d[l] * (d[l - 1] + 1) for l in range(1, len(d)))


def bler_predict(model: MlpModel, features, classes: LabelSet = BLER_CLASSES, normalizer: Optional[FeatureNormalizer] = None) -> float:
    """Class-by-class goodness scan; keeps the first class reaching a new strict maximum."""
    x = feature_vector(features, normalizer)
    g_max = -1.0
    best = classes.values[0]
    for p in classes:
        g = goodness(model, x, p).total
        if g > g_max:
            g_max = g
            best = p
    return best


@dataclass
class TuneTelemetry:
    rank: int
    cqi: int
    cqi_in: int
    predictions: int
    p_hat: Optional[float]
    p_true: Optional[float]
    error: Optional[float]
    triggered: bool
    n_ack: int
    n_nack: int
    throughput: float
    mac_count: int
    inference_macs: int
    finetune_macs: int
    rank_trace: list = field(default_factory=list)


class _Predictor:
    """Counts BLER predictions and remembers the last one for reuse."""

    def __init__(self, model, classes, normalizer):
        self.model = model
        self.classes = classes
        self.normalizer = normalizer
        self.calls = 0
        self.last_features = None
        self.last = None

    def __call__(self, features: LinkFeatures) -> float:
        y_hat, G = predict_label(self.model, feature_vector(features, self.normalizer), self.classes)
        self.calls += 1
        self.last_features = features
        self.last = (y_hat, G)
        return y_hat

    def cached(self, features: LinkFeatures):
        return self.last if self.last_features == features else None


def _backoff(predict: Callable, features: LinkFeatures, cqi_start: int, cqi_min: int, tau_bler: float) -> tuple[int, LinkFeatures]:
    cqi_l = cqi_start
    while cqi_l > cqi_min:
        trial = features.with_cqi(cqi_l)
        if predict(trial) < tau_bler:
            break
        cqi_l -= 1
    return cqi_l, features.with_cqi(cqi_l)


def _finish_period(
    predictor: _Predictor,
    features: LinkFeatures,
    rank: int,
    cqi: int,
    cqi_in: int,
    finetune: FineTuneConfig,
    state: Optional[FineTuneState],
    period_feedback: Callable,
    adapt: bool,
    rank_trace=None,
):
    model = predictor.model
    classes = predictor.classes
    q = forward_macs(model)
    c = len(classes)
    outcome = period_feedback(rank, cqi)
    n_ack, n_nack, bits = outcome.n_ack, outcome.n_nack, outcome.throughput
    p_hat = p_true = err = None
    triggered = False
    ft_macs = 0
    if n_ack + n_nack > 0:
        p_true = empirical_bler(n_ack, n_nack)
        from .data_io import quantize_bler

        y_pos = quantize_bler(p_true, classes)
        cached = predictor.cached(features)
        x = feature_vector(features, predictor.normalizer)
        if adapt:
            if state is None:
                state = FineTuneState.fresh(model, finetune)
            out, model, state = lighttune_step(model, x, y_pos, classes, finetune, state, target=p_true, prediction=cached)
            p_hat, err, triggered = out.prediction, out.error, out.triggered
            if out.inference_calls:
                predictor.calls += 1
            if triggered:
                ft_macs = 2 * q + 4 * param_count(model)
        else:
            if cached is None:
                predictor(features)
            p_hat = predictor.last[0]
            err = abs(p_hat - p_true)
    inf_macs = predictor.calls * c * q
    tele = TuneTelemetry(
        rank, cqi, cqi_in, predictor.calls, p_hat, p_true, err, triggered, n_ack, n_nack, bits,
        inf_macs + ft_macs, inf_macs, ft_macs, rank_trace or [],
    )
    return model, state, tele


def cqi_tune(
    model: MlpModel,
    cqi_in: int,
    features: LinkFeatures,
    cqi_min: int,
    tau_bler: float,
    finetune: FineTuneConfig,
    classes: LabelSet,
    period_feedback: Callable[[int, int], PeriodOutcome],
    state: Optional[FineTuneState] = None,
    normalizer: Optional[FeatureNormalizer] = None,
    adapt: bool = True,
) -> tuple[int, MlpModel, Optional[FineTuneState], TuneTelemetry]:
    """Back off the table CQI while the predicted BLER stays at or above ``tau_bler``.

    The rank in ``features.ri`` is left alone. After the period's feedback the
    model is fine-tuned once on the transmitted features (skipped when the
    period carried no transmissions, or when ``adapt`` is false).

    The LightTune step reuses the back-off loop's last prediction when it was
    made on exactly the transmitted features; otherwise it predicts again and
    the extra inference is counted.
    """
    if cqi_min < 1:
        raise InputError("cqi_min must be >= 1")
    if cqi_in < cqi_min:
        raise InputError("cqi_in must be >= cqi_min")
    if not 0 < tau_bler <= 1:
        raise InputError("tau_bler must lie in (0, 1]")
    predictor = _Predictor(model, classes, normalizer)
    cqi_out, feats = _backoff(predictor, features, cqi_in, cqi_min, tau_bler)
    model, state, tele = _finish_period(predictor, feats, feats.ri, cqi_out, cqi_in, finetune, state, period_feedback, adapt)
    return cqi_out, model, state, tele


def rank_window(r: int, r_max: int) -> range:
    if not 1 <= r <= r_max:
        raise InputError(f"rank {r} outside 1..{r_max}")
    r_low = -(-r // 2)
    r_high = min(r_low + 2, r_max)
    return range(r_low, r_high + 1)


def se_rank_select(cqi_per_rank: Mapping[int, int], table: CqiTable, r_max: int) -> int:
    """Rank maximizing ``rank * SE(CQI of that rank)``; ties keep the smaller rank."""
    missing = [i for i in range(1, r_max + 1) if i not in cqi_per_rank]
    if missing:
        raise InputError(f"missing CQI for ranks {missing}")
    best, best_se = 1, -1.0
    for i in range(1, r_max + 1):
        se = i * table.se(cqi_per_rank[i])
        if se > best_se:
            best, best_se = i, se
    return best


def ri_cqi_tune(
    model: MlpModel,
    r_table: int,
    cqi_per_rank: Mapping[int, int],
    features: LinkFeatures,
    cqi_min: Union[int, Mapping[int, int]],
    tau_bler: float,
    r_max: int,
    finetune: FineTuneConfig,
    classes: LabelSet,
    period_feedback: Callable[[int, int], PeriodOutcome],
    table: Optional[CqiTable] = None,
    state: Optional[FineTuneState] = None,
    normalizer: Optional[FeatureNormalizer] = None,
    adapt: bool = True,
) -> tuple[int, int, MlpModel, Optional[FineTuneState], TuneTelemetry]:
    """Joint rank/CQI choice over the window ``ceil(r/2) .. min(ceil(r/2)+2, r_max)``.

    ``cqi_min`` may be a single floor or a per-rank mapping.
    """
    table = table if table is not None else CqiTable.standard()
    if not 0 < tau_bler <= 1:
        raise InputError("tau_bler must lie in (0, 1]")
    window = rank_window(r_table, r_max)
    predictor = _Predictor(model, classes, normalizer)
    se_max = -1.0
    r_l, cqi_l = r_table, cqi_per_rank[r_table]
    trace = []
    for i in window:
        floor = cqi_min[i] if isinstance(cqi_min, Mapping) else cqi_min
        if floor < 1:
            raise InputError("cqi_min must be >= 1")
        cqi_test, _ = _backoff(predictor, features.with_rank(i), cqi_per_rank[i], floor, tau_bler)
        se = i * table.se(cqi_test)
        trace.append((i, cqi_test, se))
        if se > se_max:
            se_max, r_l, cqi_l = se, i, cqi_test
    feats = features.with_rank(r_l).with_cqi(cqi_l)
    model, state, tele = _finish_period(predictor, feats, r_l, cqi_l, cqi_per_rank[r_l], finetune, state, period_feedback, adapt, trace)
    return r_l, cqi_l, model, state, tele


# ---------------------------------------------------------------------------
# Table-based baseline and OLLA
# ---------------------------------------------------------------------------


def olla_step(state: OllaState, ack: bool) -> OllaState:
    """NACK raises the back-off margin by ``step_up``; ACK lowers it by ``step_down``."""
    delta = -state.step_down if ack else state.step_up
    return replace(state, offset=min(max(state.offset + delta, -state.bound), state.bound))


def olla_update(state: OllaState, n_ack: int, n_nack: int) -> OllaState:
    """Apply a whole period of feedback (equivalent to ``n_ack + n_nack`` single steps)."""
    offset = state.offset + n_nack * state.step_up - n_ack * state.step_down
    return replace(state, offset=min(max(offset, -state.bound), state.bound))


@dataclass(frozen=True)
class TableBaseline:
    """Nominal SINR thresholds per CQI and rank, as a UE vendor table would hold.

    The thresholds place each CQI on the nominal logistic curve at the target
    BLER; they know nothing about the actual channel profile, which is what
    the OLLA offset has to absorb.
    """

    mid0_db: float = -9.0
    cqi_step_db: float = 1.9
    rank_step_db: float = 0.5
    slope: float = 1.0
    corr_penalty_db: float = 0.5
    target: float = 0.1
    r_max: int = 4

    def threshold(self, cqi: int, rank: int) -> float:
        return self.mid0_db + self.cqi_step_db * (cqi - 1) + self.rank_step_db * (rank - 1) + math.log(1.0 / self.target - 1.0) / self.slope

    def layer_sinr_estimate(self, csi_snr_db: float, rank: int) -> float:
        return csi_snr_db - 10.0 * math.log10(rank) - self.corr_penalty_db * (rank - 1)

    def cqi_for_rank(self, csi_snr_db: float, rank: int, offset_db: float = 0.0) -> int:
        s = self.layer_sinr_estimate(csi_snr_db, rank) - offset_db
        cqi = 1
        for c in range(1, 16):
            if s >= self.threshold(c, rank):
                cqi = c
        return cqi

    def cqi_per_rank(self, csi_snr_db: float, offset_db: float = 0.0) -> dict[int, int]:
        return {r: self.cqi_for_rank(csi_snr_db, r, offset_db) for r in range(1, self.r_max + 1)}

    def select(self, csi_snr_db: float, table: CqiTable, offset_db: float = 0.0) -> tuple[int, int, dict[int, int]]:
        per_rank = self.cqi_per_rank(csi_snr_db, offset_db)
        r = se_rank_select(per_rank, table, self.r_max)
        return r, per_rank[r], per_rank


def cqi_floor(cqi: int, backoff_steps: int = 1) -> int:
    """``max(cqi - K, 1)``; ``K = 1`` bounds the back-off loop to a single prediction."""
    return max(cqi - backoff_steps, 1)
