"""Adam-family parameter updates used by offline training and fine-tuning.

Three variants share one bias-corrected update formula:

* ``standard-adam``: moments persist across calls, counter increments.
* ``one-step``: moments and counter are reset on every call, so the update
  depends only on the current gradient.
* ``sign-update``: ``theta -= lr * sign(grad)``, the one-step limit with
  ``beta1 = beta2 = eps = 0``.

Each layer owns an independent :class:`LayerMoments`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("standard-adam", "one-step", "sign-update")


class NumericalError(ArithmeticError):
    """Raised when a gradient or update contains NaN/Inf."""


@dataclass
class LayerMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "LayerMoments":
        return cls(np.zeros(shape), np.zeros(shape), 0)

    def copy(self) -> "LayerMoments":
        return LayerMoments(self.m.copy(), self.v.copy(), self.t)


@dataclass
class OptimizerState:
    """Per-layer Adam moments ``(m, v, t_A)``."""

    layers: list[LayerMoments] = field(default_factory=list)

    @classmethod
    def for_shapes(cls, shapes) -> "OptimizerState":
        return cls([LayerMoments.zeros(s) for s in shapes])

    def copy(self) -> "OptimizerState":
        return OptimizerState([lm.copy() for lm in self.layers])

    @property
    def num_updates(self) -> int:
        return max((lm.t for lm in self.layers), default=0)


def adam_direction(
    grad: np.ndarray,
    moments: LayerMoments,
    variant: str,
    beta1: float,
    beta2: float,
    eps: float,
) -> tuple[np.ndarray, LayerMoments]:
    """Return the update direction ``Delta theta`` and the new moments.

    The caller applies ``theta - lr * direction``. Where the bias-corrected
    denominator is exactly zero (zero gradient with ``eps = 0``) the direction
    is 0, the continuous limit, which also gives ``sgn(0) = 0``.
    """
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient; update skipped")
    if variant == "sign-update":
        return np.sign(grad), LayerMoments(moments.m, moments.v, 1)
    if variant == "standard-adam":
        t = moments.t + 1
        m = beta1 * moments.m + (1.0 - beta1) * grad
        v = beta2 * moments.v + (1.0 - beta2) * (grad * grad)
    elif variant == "one-step":
        t = 1
        m = (1.0 - beta1) * grad
        v = (1.0 - beta2) * (grad * grad)
    else:
        raise ValueError(f"unknown optimizer variant {variant!r}")
    if variant == "one-step":
        # the bias-corrected step is exactly g / (|g| + eps); squaring g could underflow
        m_hat = grad
        denom = np.abs(grad) + eps
    else:
        m_hat = m / (1.0 - beta1**t)
        denom = np.sqrt(v / (1.0 - beta2**t)) + eps
    direction = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom > 0)
    if not np.all(np.isfinite(direction)):
        raise NumericalError("non-finite Adam direction; update skipped")
    return direction, LayerMoments(m, v, t)


def apply_update(theta: np.ndarray, direction: np.ndarray, lr: float) -> np.ndarray:
    return theta - lr * direction
