"""Reproducible recipes shared by the CLI and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data_io import RunConfig, build_scenario, load_model, load_packaged_model, load_scenario, quantize_bler
from .env_sim import LinkEnvironment, ScenarioSpec
from .ff_core import BLER_CLASSES, LabelSet, MlpModel, TrainConfig, init_model, predict_label, train_offline
from .finetune import FineTuneConfig, FineTuneState, lighttune_step
from .optim import NumericalError
from .link_adapt import (
    CqiTable,
    FeatureNormalizer,
    OllaState,
    TableBaseline,
    cqi_floor,
    cqi_tune,
    empirical_bler,
    fa_md_rates,
    feature_vector,
    forward_macs,
    olla_update,
    ri_cqi_tune,
)

ALGORITHMS = ("olla", "cqi-tune", "ri-cqi-tune", "frozen")
HIGH_SNR_DB = 20.0
PACKAGED_MODEL = "bler_s0.txt"


class SimulationError(RuntimeError):
    """Numerical failure inside a run; ``period`` is where it happened."""

    def __init__(self, period: int, message: str):
        super().__init__(f"period {period}: {message}")
        self.period = period


def scenario_for_run(name: str, cfg: RunConfig, seed: Optional[int] = None) -> ScenarioSpec:
    """Canned scenario (or scenario file) with the run config's sections on top.

    A ``[shift.N]`` section in the run config replaces the whole shift
    schedule of the base scenario.
    """
    base = load_scenario(name)
    spec = build_scenario(cfg.scenario, cfg.channel, cfg.shifts, base=base)
    return spec.with_seed(cfg.seed if seed is None else seed)


def resolve_model(cfg: RunConfig):
    """``link.pretrained``: ``packaged``, ``train`` (retrain on S0) or a model file path."""
    src = cfg.link.pretrained
    if src == "packaged":
        return load_packaged_model(PACKAGED_MODEL)
    if src == "train":
        return build_packaged_model(cfg)
    return load_model(src)


def build_packaged_model(cfg: Optional[RunConfig] = None):
    """Recreate the shipped BLER model from the S0 scenario and the run config."""
    cfg = cfg if cfg is not None else RunConfig()
    return pretrain_bler_model(load_scenario("S0"), cfg.link.layer_dims, cfg.link.offline_samples, cfg.train,
                               label_scale=cfg.link.label_init_scale, seed=0, data_seed=1)


# ---------------------------------------------------------------------------
# Observation streams with a fixed (predictor-independent) decision policy
# ---------------------------------------------------------------------------


@dataclass
class Observation:
    period: int
    features: object
    p_true: float
    n_ack: int
    n_nack: int
    snr: float


def dithered_stream(env: LinkEnvironment, dither: int = 3, olla: bool = False, olla_step_up: float = 0.1, seed: int = 0,
                    baseline: Optional[TableBaseline] = None) -> list[Observation]:
    """Table decisions with the CQI dithered by ``U{-dither..dither}``.

    The decision policy ignores the predictor, so the same stream can score a
    frozen and a fine-tuned model. The dither spreads the observed BLER over
    the whole class range. With ``olla`` the table offset tracks the ACK/NACK
    feedback; that pins the BLER near the OLLA target and hides most
    environment shifts, so prediction studies leave it off.
    """
    baseline = baseline if baseline is not None else TableBaseline(r_max=env.scenario.r_max)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    state = OllaState(step_up=olla_step_up)
    out = []
    for t in env.periods():
        r, cqi, _ = baseline.select(env.csi_snr(t), env.table, state.offset)
        cqi_tx = int(np.clip(cqi + rng.integers(-dither, dither + 1), 1, 15)) if dither else cqi
        fb = env.transmit(t, r, cqi_tx)
        if olla:
            state = olla_update(state, fb.n_ack, fb.n_nack)
        out.append(Observation(t, env.features(t, r, cqi_tx), fb.empirical_bler, fb.n_ack, fb.n_nack, env.snr_mean(t)))
    return out


def offline_dataset(scenario: ScenarioSpec, n_samples: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Raw feature matrix and quantized-BLER labels from the training scenario."""
    spec = replace(scenario, duration=n_samples, seed=seed, shift_schedule=[])
    stream = dithered_stream(LinkEnvironment(spec), seed=seed)
    X = np.stack([o.features.to_vector() for o in stream])
    y = np.array([quantize_bler(o.p_true) for o in stream])
    return X, y


def pretrain_bler_model(scenario: ScenarioSpec, dims, n_samples: int, train: TrainConfig, label_scale: Optional[float] = 30.0,
                        seed: int = 0, data_seed: int = 1):
    """Offline FF training on a dithered stream from ``scenario``.

    ``label_scale`` spreads the first-layer label weights (see
    :func:`init_model`); without it the scalar label only supports a
    monotone prior over BLER classes.
    """
    X, y = offline_dataset(scenario, n_samples, data_seed)
    normalizer = FeatureNormalizer.fit(X)
    model = init_model(dims, seed=seed, label_scale=label_scale or None)
    model = train_offline(model, (normalizer(X), y), BLER_CLASSES, replace(train, seed=seed))
    return model, normalizer


# ---------------------------------------------------------------------------
# BLER prediction with and without fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class PredictionRun:
    p_hat: np.ndarray
    p_true: np.ndarray
    triggered: np.ndarray
    snr: np.ndarray

    @property
    def mae(self) -> float:
        return float(np.mean(np.abs(self.p_hat - self.p_true)))

    def mae_from(self, start: int) -> float:
        return float(np.mean(np.abs(self.p_hat[start:] - self.p_true[start:])))


def run_prediction(model: MlpModel, normalizer, stream: list[Observation], finetune: Optional[FineTuneConfig] = None, classes: LabelSet = BLER_CLASSES) -> PredictionRun:
    """Predict every period; with ``finetune`` set, run LightTune on the feedback."""
    state = FineTuneState.fresh(model, finetune) if finetune is not None else None
    p_hat = np.empty(len(stream))
    trig = np.zeros(len(stream), dtype=bool)
    for k, obs in enumerate(stream):
        x = feature_vector(obs.features, normalizer)
        if finetune is None:
            p_hat[k] = predict_label(model, x, classes)[0]
            continue
        out, model, state = lighttune_step(model, x, quantize_bler(obs.p_true, classes), classes, finetune, state, target=obs.p_true)
        p_hat[k] = out.prediction
        trig[k] = out.triggered
    return PredictionRun(p_hat, np.array([o.p_true for o in stream]), trig, np.array([o.snr for o in stream]))


# ---------------------------------------------------------------------------
# Closed-loop link adaptation
# ---------------------------------------------------------------------------


@dataclass
class LinkRunConfig:
    algorithm: str = "cqi-tune"
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    tau_bler: float = 0.9
    backoff_steps: int = 1
    olla_step_up: float = 0.1
    olla_target: float = 0.1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")


def link_run_config(cfg: RunConfig, algorithm: str) -> LinkRunConfig:
    return LinkRunConfig(algorithm=algorithm, finetune=cfg.finetune, tau_bler=cfg.link.tau_bler, backoff_steps=cfg.link.backoff_steps,
                         olla_step_up=cfg.link.olla_step_up, olla_target=cfg.link.olla_target)


def run_link(env: LinkEnvironment, model: MlpModel, normalizer, cfg: LinkRunConfig, classes: LabelSet = BLER_CLASSES) -> list[dict]:
    """Closed-loop run; returns one telemetry row per CSI-RS period.

    ``olla`` transmits the table choice and only logs what the (untouched)
    model would have predicted; ``frozen`` runs the CQI back-off with a model
    that is never fine-tuned. A non-finite update raises
    :class:`SimulationError` naming the period.
    """
    try:
        return _run_link(env, model, normalizer, cfg, classes)
    except NumericalError as exc:
        raise SimulationError(getattr(exc, "period", -1), str(exc)) from exc


def _run_link(env, model, normalizer, cfg, classes):
    r_max = env.scenario.r_max
    baseline = TableBaseline(r_max=r_max, target=cfg.olla_target)
    olla = OllaState(step_up=cfg.olla_step_up, target=cfg.olla_target)
    state = FineTuneState.fresh(model, cfg.finetune)
    q = forward_macs(model)
    rows = []
    for t in env.periods():
        r, cqi, per_rank = baseline.select(env.csi_snr(t), env.table, olla.offset)
        feats = env.features(t, r, cqi)
        feedback = lambda rank, c, _t=t: env.transmit(_t, rank, c)
        if cfg.algorithm == "olla":
            fb = feedback(r, cqi)
            p_hat, _ = predict_label(model, feature_vector(feats, normalizer), classes)
            p_true = fb.empirical_bler
            row = dict(rank=r, cqi=cqi, p_hat=p_hat, p_true_empirical=p_true, error=abs(p_hat - p_true), triggered=False,
                       throughput_bits=fb.throughput, mac_count=len(classes) * q)
            n_ack, n_nack = fb.n_ack, fb.n_nack
        else:
            try:
                if cfg.algorithm in ("cqi-tune", "frozen"):
                    floor = cqi_floor(cqi, cfg.backoff_steps)
                    cqi_out, model, state, tele = cqi_tune(model, cqi, feats, floor, cfg.tau_bler, cfg.finetune, classes, feedback,
                                                           state=state, normalizer=normalizer, adapt=cfg.algorithm == "cqi-tune")
                else:
                    floors = {i: cqi_floor(c, cfg.backoff_steps) for i, c in per_rank.items()}
                    r_l, cqi_l, model, state, tele = ri_cqi_tune(model, r, per_rank, feats, floors, cfg.tau_bler, r_max, cfg.finetune,
                                                               classes, feedback, table=env.table, state=state, normalizer=normalizer)
            except NumericalError as exc:
                exc.period = t
                raise
            row = _tele_row(tele)
            n_ack, n_nack = tele.n_ack, tele.n_nack
        olla = olla_update(olla, n_ack, n_nack)
        row.update(period=t, algorithm=cfg.algorithm, snr=env.snr_mean(t))
        rows.append(row)
    return rows


def _tele_row(tele) -> dict:
    return dict(rank=tele.rank, cqi=tele.cqi, p_hat=tele.p_hat, p_true_empirical=tele.p_true, error=tele.error,
                triggered=tele.triggered, throughput_bits=tele.throughput, mac_count=tele.mac_count)


def segment_mean(rows: list[dict], key: str, start: int = 0, snr_min: Optional[float] = None) -> Optional[float]:
    """Mean of ``key`` over periods ``>= start`` (and ``snr >= snr_min`` if given)."""
    vals = [r[key] for r in rows if r["period"] >= start and (snr_min is None or r["snr"] >= snr_min) and r[key] is not None]
    return float(np.mean(vals)) if vals else None


def summarize(rows: list[dict], tau_bler: float = 0.9) -> dict:
    errs = [r["error"] for r in rows if r["error"] is not None]
    log = [(r["p_hat"], r["p_true_empirical"]) for r in rows if r["p_hat"] is not None]
    fa, md = fa_md_rates(log, tau_bler) if log else (None, None)
    trig = np.array([bool(r["triggered"]) for r in rows], dtype=float)
    return {
        "periods": len(rows),
        "mae": float(np.mean(errs)) if errs else None,
        "p_fa": fa,
        "p_md": md,
        "mean_throughput_bits": float(np.mean([r["throughput_bits"] for r in rows])),
        "high_snr_throughput_bits": segment_mean(rows, "throughput_bits", snr_min=HIGH_SNR_DB),
        "trigger_rate": float(trig.mean()) if len(trig) else 0.0,
        "max_mac_count": int(max(r["mac_count"] for r in rows)),
    }
