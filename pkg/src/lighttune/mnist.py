"""Forward-forward MNIST recipe used to compare the two layer losses.

The BLER network appends a scalar label to the features. That encoding does
not carry enough signal for digits, so this recipe follows the common FF
reference setup instead:

* the label is written into the first 10 pixels (one-hot, scaled to the
  row maximum) and every input row is scaled to unit length;
* each layer's loss is applied to the layer-mean goodness
  ``g = mean_j h[j]**2`` instead of per neuron;
* activations are rescaled to unit length before entering the next layer;
* prediction sums goodness over all layers.

Training is minibatched and all layers step on the same minibatch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ff_core import InputError
from .optim import LayerMoments, adam_direction

NUM_CLASSES = 10


@dataclass
class MnistRecipe:
    hidden: tuple = (256, 256)
    epochs: int = 20
    batch_size: int = 50
    lr: float = 0.03
    threshold: float = 2.0
    loss: str = "quadratic"
    seed: int = 0
    train_samples: int = 60000

    def __post_init__(self):
        if self.loss not in ("quadratic", "softplus"):
            raise InputError(f"unknown loss {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise InputError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class MnistNet:
    thetas: list = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.thetas)


def overlay_label(images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Zero the first 10 pixels and light pixel ``label`` with the row maximum."""
    Z = np.array(images, dtype=float, copy=True)
    peak = Z.max(axis=1)
    Z[:, :NUM_CLASSES] = 0.0
    Z[np.arange(Z.shape[0]), np.asarray(labels, dtype=int)] = peak
    return Z


def unit_rows(A: np.ndarray) -> np.ndarray:
    return A / (np.linalg.norm(A, axis=1, keepdims=True) + 1e-12)


def _with_ones(A: np.ndarray) -> np.ndarray:
    return np.hstack([A, np.ones((A.shape[0], 1))])


def mean_goodness_coeffs(h_pos: np.ndarray, h_neg: np.ndarray, T: float, loss: str):
    """Row factors of the gradient when the loss acts on the layer-mean goodness."""
    M = h_pos.shape[1]
    g_pos = np.mean(h_pos * h_pos, axis=1, keepdims=True)
    g_neg = np.mean(h_neg * h_neg, axis=1, keepdims=True)
    if loss == "quadratic":
        a_pos = (4.0 / M) * (g_pos - T - 2.0) * h_pos
        a_neg = (4.0 / M) * (g_neg - T + 2.0) * h_neg
    else:
        a_pos = (2.0 / M) * -(0.5 * (1.0 + np.tanh(0.5 * (T - g_pos)))) * h_pos
        a_neg = (2.0 / M) * (0.5 * (1.0 + np.tanh(0.5 * (g_neg - T)))) * h_neg
    return a_pos, a_neg


def init_net(input_dim: int, hidden, seed: int) -> MnistNet:
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden]
    thetas = []
    for l in range(1, len(dims)):
        bound = 1.0 / np.sqrt(dims[l - 1])
        th = rng.uniform(-bound, bound, size=(dims[l], dims[l - 1] + 1))
        th[:, -1] = 0.0
        thetas.append(th)
    return MnistNet(thetas)


def layer_goodness(net: MnistNet, images: np.ndarray, label: int) -> np.ndarray:
    """``(n, L)`` summed squared activations per layer for a fixed candidate label."""
    h = unit_rows(overlay_label(images, np.full(images.shape[0], label)))
    out = np.empty((images.shape[0], net.num_layers))
    for l, th in enumerate(net.thetas):
        a = np.maximum(_with_ones(h) @ th.T, 0.0)
        out[:, l] = np.sum(a * a, axis=1)
        h = unit_rows(a)
    return out


def predict(net: MnistNet, images: np.ndarray, batch: int = 2000) -> np.ndarray:
    """Digit with the largest goodness summed over layers (first max on ties)."""
    preds = np.empty(images.shape[0], dtype=np.int64)
    for s in range(0, images.shape[0], batch):
        xb = images[s : s + batch]
        G = np.stack([layer_goodness(net, xb, c).sum(axis=1) for c in range(NUM_CLASSES)], axis=1)
        preds[s : s + batch] = np.argmax(G, axis=1)
    return preds


def accuracy(net: MnistNet, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(net, images) == np.asarray(labels)))


def train(images: np.ndarray, labels: np.ndarray, recipe: MnistRecipe,
          callback: Optional[Callable[[int, MnistNet], None]] = None) -> MnistNet:
    """Train the FF net; ``callback(epoch, net)`` runs after every epoch."""
    images = np.asarray(images, dtype=float)[: recipe.train_samples]
    labels = np.asarray(labels, dtype=int)[: recipe.train_samples]
    if images.shape[0] == 0:
        raise InputError("empty training set")
    rng = np.random.default_rng(recipe.seed)
    net = init_net(images.shape[1], recipe.hidden, recipe.seed)
    moments = [LayerMoments.zeros(th.shape) for th in net.thetas]
    n = images.shape[0]
    for epoch in range(recipe.epochs):
        order = rng.permutation(n)
        shift = rng.integers(1, NUM_CLASSES, size=n)
        for s in range(0, n, recipe.batch_size):
            idx = order[s : s + recipe.batch_size]
            wrong = (labels[idx] + shift[s : s + recipe.batch_size]) % NUM_CLASSES
            hp = unit_rows(overlay_label(images[idx], labels[idx]))
            hn = unit_rows(overlay_label(images[idx], wrong))
            for l, th in enumerate(net.thetas):
                zp, zn = _with_ones(hp), _with_ones(hn)
                op = np.maximum(zp @ th.T, 0.0)
                on = np.maximum(zn @ th.T, 0.0)
                a_pos, a_neg = mean_goodness_coeffs(op, on, recipe.threshold, recipe.loss)
                grad = (a_pos.T @ zp + a_neg.T @ zn) / idx.shape[0]
                direction, moments[l] = adam_direction(grad, moments[l], "standard-adam", 0.9, 0.999, 1e-8)
                th -= recipe.lr * direction
                hp = unit_rows(np.maximum(zp @ th.T, 0.0))
                hn = unit_rows(np.maximum(zn @ th.T, 0.0))
        if callback is not None:
            callback(epoch, net)
    return net


@dataclass
class LossComparison:
    accuracy: dict
    seconds: dict
    curves: dict

    @property
    def gap_pp(self) -> float:
        return 100.0 * abs(self.accuracy["quadratic"] - self.accuracy["softplus"])


def compare_losses(train_set, test_set, recipe: MnistRecipe, track_epochs: bool = False, log=None) -> LossComparison:
    """Train once per loss with otherwise identical settings and report test accuracy."""
    acc, secs, curves = {}, {}, {}
    for loss in ("softplus", "quadratic"):
        r = MnistRecipe(**{**recipe.__dict__, "loss": loss})
        curve = []

        def cb(epoch, net, _curve=curve, _loss=loss):
            if track_epochs:
                a = accuracy(net, test_set.images, test_set.labels)
                _curve.append(a)
                if log:
                    log(f"{_loss} epoch {epoch + 1}: test accuracy {a:.4f}")

        t0 = time.perf_counter()
        net = train(train_set.images, train_set.labels, r, callback=cb)
        acc[loss] = accuracy(net, test_set.images, test_set.labels)
        secs[loss] = time.perf_counter() - t0
        curves[loss] = curve
        if log:
            log(f"{loss}: test accuracy {acc[loss]:.4f} in {secs[loss]:.0f} s")
    return LossComparison(acc, secs, curves)
