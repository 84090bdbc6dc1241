"""Error-triggered, buffer-less online fine-tuning of an FF model.

One call to :func:`lighttune_step` handles one labelled observation: predict,
measure the error, and only if the error reaches ``delta`` form a single
positive/negative pair and apply one optimizer step per layer. Nothing about
the observation is retained afterwards; the only carried state is the model,
the optimizer moments and the negative-sampling RNG.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ff_core import LOSSES, InputError, LabelSet, MlpModel, augment, forward_pass, layer_loss, predict_label
from .optim import VARIANTS, NumericalError, OptimizerState, adam_direction

log = logging.getLogger(__name__)

SAMPLING = ("uniform", "hard")


@dataclass
class FineTuneConfig:
    delta: float = 0.3
    alpha_f: float = 0.03
    threshold_T: float = 9.0
    variant: str = "one-step"
    sampling: str = "uniform"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    loss: str = "quadratic"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.sampling not in SAMPLING:
            raise InputError(f"unknown sampling {self.sampling!r}; expected one of {SAMPLING}")
        if self.loss not in LOSSES:
            raise InputError(f"unknown loss {self.loss!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon < 0 or self.delta < 0:
            raise InputError("epsilon and delta must be >= 0")
        if not self.alpha_f > 0:
            raise InputError("alpha_f must be > 0")


@dataclass
class FineTuneState:
    optimizer: OptimizerState
    rng: np.random.Generator

    @classmethod
    def fresh(cls, model: MlpModel, config: FineTuneConfig) -> "FineTuneState":
        return cls(OptimizerState.for_shapes([t.shape for t in model.thetas]), np.random.default_rng(config.seed))


@dataclass
class StepOutcome:
    prediction: float
    error: float
    triggered: bool
    y_pos: float
    y_neg: Optional[float] = None
    loss: Optional[float] = None
    inference_calls: int = 0
    forward_passes: int = 0
    goodness: Optional[np.ndarray] = field(default=None, repr=False)


def should_update(e: float, delta: float) -> bool:
    if e < 0:
        raise InputError(f"error must be >= 0, got {e}")
    return bool(e >= delta)


def sample_negative(y_pos: float, labels: LabelSet, strategy: str, y_hat: Optional[float], rng: np.random.Generator) -> float:
    """Draw an incorrect label.

    ``uniform`` picks each of the ``C - 1`` wrong labels with equal
    probability. ``hard`` returns the model's own wrong prediction; if that
    prediction is actually correct the call falls back to uniform.
    """
    if strategy == "hard":
        if y_hat is not None and float(y_hat) != float(y_pos):
            return float(y_hat)
        log.info("hard negative unavailable (prediction equals positive label); using uniform")
    elif strategy != "uniform":
        raise InputError(f"unknown sampling strategy {strategy!r}")
    k = labels.index(y_pos)
    j = int(rng.integers(len(labels) - 1))
    return labels.values[j + 1 if j >= k else j]


def optimizer_step(model: MlpModel, grads: list, state: OptimizerState, config: FineTuneConfig) -> tuple[MlpModel, OptimizerState]:
    """Apply one update to every layer. On a non-finite gradient nothing changes and
    :class:`NumericalError` propagates."""
    if len(grads) != model.num_layers:
        raise InputError("one gradient per layer is required")
    new_thetas = []
    new_moments = []
    for theta, g, lm in zip(model.thetas, grads, state.layers):
        if g.shape != theta.shape:
            raise InputError(f"gradient shape {g.shape} does not match parameters {theta.shape}")
        direction, lm2 = adam_direction(g, lm, config.variant, config.beta1, config.beta2, config.epsilon)
        new_thetas.append(theta - config.alpha_f * direction)
        new_moments.append(lm2)
    return MlpModel(new_thetas), OptimizerState(new_moments)


def _pair_gradients(model: MlpModel, z_pos: np.ndarray, z_neg: np.ndarray, T: float, loss: str):
    """Per-layer gradients from one forward pass per polarity (all layers read the
    same pre-update activations)."""
    acts_pos = forward_pass(model, z_pos)
    acts_neg = forward_pass(model, z_neg)
    coeffs = LOSSES[loss]
    grads = []
    for l in range(1, model.num_layers + 1):
        a_pos, a_neg = coeffs(acts_pos.h[l], acts_neg.h[l], T)
        grads.append(np.outer(a_pos, np.append(acts_pos.h[l - 1], 1.0)) + np.outer(a_neg, np.append(acts_neg.h[l - 1], 1.0)))
    total = sum(layer_loss(model, l, acts_pos, acts_neg, T, loss) for l in range(1, model.num_layers + 1))
    return grads, total


def lighttune_step(
    model: MlpModel,
    x,
    y_true: float,
    labels: LabelSet,
    config: FineTuneConfig,
    state: FineTuneState,
    *,
    target: Optional[float] = None,
    prediction: Optional[tuple[float, np.ndarray]] = None,
) -> tuple[StepOutcome, MlpModel, FineTuneState]:
    """One observation of the online loop.

    ``y_true`` is the positive label. The trigger error is
    ``|y_hat - target|`` when ``target`` is given (e.g. the raw empirical BLER
    whose quantized class is ``y_true``) and ``|y_hat - y_true|`` otherwise.

    ``prediction`` lets a caller that has just run :func:`predict_label` on the
    same model and features hand over ``(y_hat, goodness)`` instead of paying
    for a second inference.

    When the step does not trigger, the returned model and state are the very
    objects passed in.
    """
    if y_true not in labels:
        raise InputError(f"label {y_true} not in label set")
    inference_calls = 0
    if prediction is None:
        y_hat, G = predict_label(model, x, labels)
        inference_calls = 1
    else:
        y_hat, G = prediction
    ref = float(y_true) if target is None else float(target)
    e = abs(float(y_hat) - ref)
    if not should_update(e, config.delta):
        return StepOutcome(y_hat, e, False, float(y_true), inference_calls=inference_calls, goodness=G), model, state
    y_neg = sample_negative(y_true, labels, config.sampling, y_hat, state.rng)
    grads, loss_value = _pair_gradients(model, augment(x, y_true), augment(x, y_neg), config.threshold_T, config.loss)
    try:
        new_model, new_opt = optimizer_step(model, grads, state.optimizer, config)
    except NumericalError:
        log.error("non-finite fine-tuning gradient; model left unchanged")
        raise
    outcome = StepOutcome(y_hat, e, True, float(y_true), y_neg, loss_value, inference_calls, 2, G)
    return outcome, new_model, FineTuneState(new_opt, state.rng)
