"""Forward-forward core: ReLU MLP, goodness, losses and layer-local gradients.

Layers are indexed ``1..L`` to match the activation list, where
``h[0] = z = [x, y]`` is the augmented input. Each layer stores one augmented
parameter matrix ``theta_l = [W_l, b_l]`` of shape ``(M_l, M_{l-1} + 1)``;
row ``j`` holds the parameters of neuron ``j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .optim import LayerMoments, OptimizerState, adam_direction


class ShapeError(ValueError):
    pass


class InputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class MlpModel:
    thetas: list[np.ndarray]

    def __post_init__(self):
        if len(self.thetas) < 1:
            raise ShapeError("model needs at least one layer")
        self.thetas = [np.asarray(t, dtype=float) for t in self.thetas]
        for l in range(1, len(self.thetas)):
            if self.thetas[l].shape[1] != self.thetas[l - 1].shape[0] + 1:
                raise ShapeError(f"layer {l + 1} input width does not match layer {l} output")
        for t in self.thetas:
            if t.ndim != 2 or t.shape[0] < 1 or t.shape[1] < 2:
                raise ShapeError(f"bad parameter matrix shape {t.shape}")

    @classmethod
    def from_weights(cls, weights: Sequence, biases: Sequence) -> "MlpModel":
        thetas = [np.column_stack([np.asarray(w, float), np.asarray(b, float)]) for w, b in zip(weights, biases)]
        return cls(thetas)

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "MlpModel":
        return cls([np.zeros((dims[l], dims[l - 1] + 1)) for l in range(1, len(dims))])

    @property
    def dims(self) -> list[int]:
        return [self.thetas[0].shape[1] - 1] + [t.shape[0] for t in self.thetas]

    @property
    def num_layers(self) -> int:
        return len(self.thetas)

    def weight(self, l: int) -> np.ndarray:
        return self.thetas[l - 1][:, :-1]

    def bias(self, l: int) -> np.ndarray:
        return self.thetas[l - 1][:, -1]

    def copy(self) -> "MlpModel":
        return MlpModel([t.copy() for t in self.thetas])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.thetas)

    def equal(self, other: "MlpModel") -> bool:
        """Bit-exact parameter equality."""
        return self.dims == other.dims and all(np.array_equal(a, b) for a, b in zip(self.thetas, other.thetas))


def init_model(dims: Sequence[int], seed: int = 0, label_scale: float | None = None,
               label_range: tuple[float, float] = (0.0, 0.9)) -> MlpModel:
    """Fan-in uniform init ``U(-1/sqrt(M_{l-1}), 1/sqrt(M_{l-1}))`` with zero biases.

    With ``label_scale`` set, the first layer's label column (the last input)
    is drawn from ``U(-label_scale, label_scale)`` and each unit's bias puts
    its ReLU kink at a uniform point of ``label_range``. Layer-1 goodness is
    convex in a scalar label, so only units that switch on and off across
    the label range give the next layer something to build a peak from.
    """
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ShapeError(f"invalid dims {list(dims)}")
    rng = np.random.default_rng(seed)
    thetas = []
    for l in range(1, len(dims)):
        bound = 1.0 / math.sqrt(dims[l - 1])
        w = rng.uniform(-bound, bound, size=(dims[l], dims[l - 1]))
        thetas.append(np.column_stack([w, np.zeros(dims[l])]))
    if label_scale is not None:
        lo, hi = label_range
        w_y = rng.uniform(-label_scale, label_scale, size=dims[1])
        thetas[0][:, -2] = w_y
        thetas[0][:, -1] = -w_y * rng.uniform(lo, hi, size=dims[1])
    return MlpModel(thetas)


@dataclass(frozen=True)
class LabelSet:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) < 2:
            raise InputError("label set needs at least two labels")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise InputError("labels must be strictly increasing")

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __contains__(self, y) -> bool:
        return float(y) in self.values

    def index(self, y: float) -> int:
        return self.values.index(float(y))

    def as_array(self) -> np.ndarray:
        return np.array(self.values)


# Quantized BLER classes {0, 0.1, ..., 0.9}; written as k/10 so 0.3 is the nearest double.
BLER_CLASSES = LabelSet(tuple(k / 10 for k in range(10)))


@dataclass
class AugmentedSample:
    features: np.ndarray
    label: float

    def augmented(self) -> np.ndarray:
        return augment(self.features, self.label)


@dataclass
class LayerActivations:
    h: list[np.ndarray]
    p: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.h[-1]


@dataclass
class GoodnessReport:
    per_layer: list[np.ndarray]
    total: float

    @property
    def G(self) -> float:
        return self.total


def augment(x, y: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.append(x, float(y))


# ---------------------------------------------------------------------------
# Forward computation
# ---------------------------------------------------------------------------


def forward_pass(model: MlpModel, z) -> LayerActivations:
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.shape[0] != model.dims[0]:
        raise ShapeError(f"input length {z.shape} does not match model input width {model.dims[0]}")
    if not np.all(np.isfinite(z)):
        raise InputError("non-finite input")
    hs = [z]
    ps = []
    h = z
    for theta in model.thetas:
        p = theta[:, :-1] @ h + theta[:, -1]
        h = np.maximum(p, 0.0)
        ps.append(p)
        hs.append(h)
    return LayerActivations(hs, ps)


def forward_batch(model: MlpModel, Z: np.ndarray) -> list[np.ndarray]:
    """Row-wise forward pass of a matrix of augmented inputs; returns ``[H_0, ..., H_L]``."""
    H = np.asarray(Z, dtype=float)
    out = [H]
    for theta in model.thetas:
        H = np.maximum(H @ theta[:, :-1].T + theta[:, -1], 0.0)
        out.append(H)
    return out


def goodness(model: MlpModel, x, y: float) -> GoodnessReport:
    acts = forward_pass(model, augment(x, y))
    per_layer = [h * h for h in acts.h[1:]]
    return GoodnessReport(per_layer, float(np.sum(per_layer[-1])))


def candidate_goodness(model: MlpModel, x, labels: LabelSet) -> np.ndarray:
    """Terminal goodness ``G(x, y)`` for every candidate label, in label order."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite input")
    Z = np.empty((len(labels), x.shape[0] + 1))
    Z[:, :-1] = x
    Z[:, -1] = labels.as_array()
    H = forward_batch(model, Z)[-1]
    return np.sum(H * H, axis=1)


def argmax_first(values: np.ndarray) -> int:
    """Index of the maximum; on exact ties the earliest index wins."""
    return int(np.argmax(values))


def predict_label(model: MlpModel, x, labels: LabelSet) -> tuple[float, np.ndarray]:
    """Label with highest goodness, plus all candidate goodness values.

    Ties go to the smallest label (labels are ascending, ``np.argmax`` keeps
    the first maximum).
    """
    G = candidate_goodness(model, x, labels)
    return labels.values[argmax_first(G)], G


# ---------------------------------------------------------------------------
# Losses and gradients
# ---------------------------------------------------------------------------


def _check_T(T):
    if not math.isfinite(T):
        raise InputError("threshold T must be finite")


def softplus(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


def softplus_loss(g_pos, g_neg, T: float) -> float:
    _check_T(T)
    g_pos = np.asarray(g_pos, dtype=float)
    g_neg = np.asarray(g_neg, dtype=float)
    M = g_pos.shape[0]
    return float(np.sum(softplus(-(g_pos - T))) / M + np.sum(softplus(g_neg - T)) / M)


def quadratic_loss(g_pos, g_neg, T: float) -> float:
    _check_T(T)
    dp = np.asarray(g_pos, dtype=float) - T
    dn = np.asarray(g_neg, dtype=float) - T
    M = dp.shape[0]
    return float(np.sum(dp * dp - 4.0 * dp) / M + np.sum(dn * dn + 4.0 * dn) / M)


def _with_one(h: np.ndarray) -> np.ndarray:
    return np.append(h, 1.0)


def quadratic_coeffs(h_pos: np.ndarray, h_neg: np.ndarray, T: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-neuron factors multiplying ``h~_{l-1}^T`` in the closed-form gradient.

    Works row-wise on ``(batch, M_l)`` arrays as well as on single vectors.
    """
    M = h_pos.shape[-1]
    a_pos = (4.0 / M) * ((h_pos * h_pos - T - 2.0) * h_pos * (h_pos > 0))
    a_neg = (4.0 / M) * ((h_neg * h_neg - T + 2.0) * h_neg * (h_neg > 0))
    return a_pos, a_neg


def softplus_coeffs(h_pos: np.ndarray, h_neg: np.ndarray, T: float) -> tuple[np.ndarray, np.ndarray]:
    M = h_pos.shape[-1]
    # d/dg softplus(-(g-T)) = -sigmoid(T-g);  d/dg softplus(g-T) = sigmoid(g-T)
    s_pos = 0.5 * (1.0 + np.tanh(0.5 * (T - h_pos * h_pos)))
    s_neg = 0.5 * (1.0 + np.tanh(0.5 * (h_neg * h_neg - T)))
    a_pos = (2.0 / M) * (-s_pos * h_pos * (h_pos > 0))
    a_neg = (2.0 / M) * (s_neg * h_neg * (h_neg > 0))
    return a_pos, a_neg


LOSSES = {"quadratic": quadratic_coeffs, "softplus": softplus_coeffs}


def layer_gradient(
    model: MlpModel,
    layer: int,
    acts_pos: LayerActivations,
    acts_neg: LayerActivations,
    T: float,
    loss: str = "quadratic",
) -> np.ndarray:
    """Closed-form gradient of the layer-``layer`` loss w.r.t. ``[W_l, b_l]``.

    Uses only ``h_{l-1}`` and ``h_l`` of the two samples; nothing from other
    layers enters.
    """
    _check_T(T)
    if not 1 <= layer <= model.num_layers:
        raise ShapeError(f"layer index {layer} outside 1..{model.num_layers}")
    shape = model.thetas[layer - 1].shape
    h_pos, h_neg = acts_pos.h[layer], acts_neg.h[layer]
    in_pos, in_neg = acts_pos.h[layer - 1], acts_neg.h[layer - 1]
    if h_pos.shape != (shape[0],) or h_neg.shape != (shape[0],) or in_pos.shape != (shape[1] - 1,) or in_neg.shape != (shape[1] - 1,):
        raise ShapeError("activations do not match layer shape")
    a_pos, a_neg = LOSSES[loss](h_pos, h_neg, T)
    return np.outer(a_pos, _with_one(in_pos)) + np.outer(a_neg, _with_one(in_neg))


def layer_loss(model: MlpModel, layer: int, acts_pos: LayerActivations, acts_neg: LayerActivations, T: float, loss: str = "quadratic") -> float:
    g_pos = acts_pos.h[layer] ** 2
    g_neg = acts_neg.h[layer] ** 2
    fn = quadratic_loss if loss == "quadratic" else softplus_loss
    return fn(g_pos, g_neg, T)


# ---------------------------------------------------------------------------
# Offline training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 1
    lr: float = 0.03
    threshold: float = 9.0
    loss: str = "quadratic"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    negative: str = "uniform"
    shuffle: bool = True
    refresh_inputs: bool = True
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise InputError(f"unknown loss {self.loss!r}")
        if self.negative != "uniform":
            raise InputError("offline training supports uniform negatives only")
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")


def train_offline(
    model: MlpModel,
    dataset: Sequence[AugmentedSample] | tuple[np.ndarray, np.ndarray],
    labels: LabelSet,
    config: TrainConfig,
    state: OptimizerState | None = None,
    callback=None,
) -> MlpModel:
    """Greedy layer-local FF training, one positive/negative pair per sample.

    Within a sample, layers are updated in order ``1..L``; the input to layer
    ``l`` is the output of layer ``l-1`` recomputed after its update (set
    ``config.refresh_inputs=False`` to reuse the pre-update forward pass).

    With ``config.batch_size > 1`` each optimizer step uses the mean of the
    per-pair closed-form gradients over a minibatch; ``batch_size=1`` is the
    strict single-pair path.

    ``dataset`` is a list of :class:`AugmentedSample` or a ``(X, y)`` pair of
    arrays. ``callback(epoch, model)`` is invoked after each epoch.
    """
    X, y = _as_arrays(dataset)
    if X.shape[0] == 0:
        raise InputError("empty dataset")
    if X.shape[1] + 1 != model.dims[0]:
        raise ShapeError("feature width does not match model input")
    label_arr = labels.as_array()
    y_idx = np.array([labels.index(v) for v in y])
    C = len(labels)
    thetas = [t.copy() for t in model.thetas]
    if state is None:
        state = OptimizerState.for_shapes([t.shape for t in thetas])
    moments = state.layers
    coeffs = LOSSES[config.loss]
    T, lr = config.threshold, config.lr
    b1, b2, eps = config.beta1, config.beta2, config.eps
    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        # offsets in 1..C-1 map the true index to a uniformly chosen wrong one
        neg_shift = rng.integers(1, C, size=n)
        if config.batch_size > 1:
            _batched_epoch(thetas, moments, X, label_arr, y_idx, order, neg_shift, coeffs, config)
            if callback is not None:
                callback(epoch, MlpModel([t.copy() for t in thetas]))
            continue
        for k in range(n):
            i = order[k]
            zp = np.empty(X.shape[1] + 2)
            zp[:-2] = X[i]
            zp[-2] = label_arr[y_idx[i]]
            zp[-1] = 1.0
            zn = zp.copy()
            zn[-2] = label_arr[(y_idx[i] + neg_shift[k]) % C]
            hp, hn = zp, zn
            for l, theta in enumerate(thetas):
                op = np.maximum(theta @ hp, 0.0)
                on = np.maximum(theta @ hn, 0.0)
                a_pos, a_neg = coeffs(op, on, T)
                grad = np.outer(a_pos, hp) + np.outer(a_neg, hn)
                direction, moments[l] = adam_direction(grad, moments[l], "standard-adam", b1, b2, eps)
                theta -= lr * direction
                if l + 1 < len(thetas):
                    if config.refresh_inputs:
                        op = np.maximum(theta @ hp, 0.0)
                        on = np.maximum(theta @ hn, 0.0)
                    hp = np.append(op, 1.0)
                    hn = np.append(on, 1.0)
        if callback is not None:
            callback(epoch, MlpModel([t.copy() for t in thetas]))
    out = MlpModel(thetas)
    if not out.is_finite():
        raise InputError("training diverged to non-finite parameters")
    return out


def _batched_epoch(thetas, moments, X, label_arr, y_idx, order, neg_shift, coeffs, config):
    C = label_arr.shape[0]
    T, lr = config.threshold, config.lr
    B = config.batch_size
    for s in range(0, order.shape[0], B):
        idx = order[s : s + B]
        ones = np.ones((idx.shape[0], 1))
        hp = np.hstack([X[idx], label_arr[y_idx[idx]][:, None], ones])
        hn = np.hstack([X[idx], label_arr[(y_idx[idx] + neg_shift[s : s + B]) % C][:, None], ones])
        for l, theta in enumerate(thetas):
            op = np.maximum(hp @ theta.T, 0.0)
            on = np.maximum(hn @ theta.T, 0.0)
            a_pos, a_neg = coeffs(op, on, T)
            grad = (a_pos.T @ hp + a_neg.T @ hn) / idx.shape[0]
            direction, moments[l] = adam_direction(grad, moments[l], "standard-adam", config.beta1, config.beta2, config.eps)
            theta -= lr * direction
            if l + 1 < len(thetas):
                if config.refresh_inputs:
                    op = np.maximum(hp @ theta.T, 0.0)
                    on = np.maximum(hn @ theta.T, 0.0)
                hp = np.hstack([op, ones])
                hn = np.hstack([on, ones])


def _as_arrays(dataset):
    if isinstance(dataset, tuple):
        X, y = dataset
        return np.asarray(X, dtype=float), np.asarray(y, dtype=float)
    dataset = list(dataset)
    if not dataset:
        return np.zeros((0, 0)), np.zeros(0)
    X = np.stack([np.asarray(s.features, dtype=float) for s in dataset])
    y = np.array([s.label for s in dataset], dtype=float)
    return X, y


def accuracy(model: MlpModel, X: np.ndarray, y: np.ndarray, labels: LabelSet, batch: int = 2048) -> float:
    """Fraction of rows whose predicted label equals ``y`` (batched inference)."""
    pred = predict_many(model, X, labels, batch=batch)
    return float(np.mean(pred == np.asarray(y, dtype=float)))


def predict_many(model: MlpModel, X: np.ndarray, labels: LabelSet, batch: int = 2048) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    C = len(labels)
    lab = labels.as_array()
    out = np.empty(X.shape[0])
    for s in range(0, X.shape[0], batch):
        xb = X[s : s + batch]
        G = np.empty((xb.shape[0], C))
        for c in range(C):
            Z = np.column_stack([xb, np.full(xb.shape[0], lab[c])])
            H = forward_batch(model, Z)[-1]
            G[:, c] = np.sum(H * H, axis=1)
        out[s : s + batch] = lab[np.argmax(G, axis=1)]
    return out
