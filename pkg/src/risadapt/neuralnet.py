"""Fully connected ReLU networks trained with Adam and early stopping.

Everything runs in float64 numpy. Inputs and outputs are standardized with
per-feature statistics stored on the model, and the loss is measured in the
normalized output space.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import FormatError, InvalidArgumentError, NumericError, TrainingError

LOSSES = ("mse", "arc")


@dataclass
class Mlp:
    """Weights (``out x in`` per layer), biases and normalization statistics."""

    weights: list
    biases: list
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def __post_init__(self):
        sizes = self.layer_sizes
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[0],):
                raise InvalidArgumentError(f"layer {i}: bias shape {b.shape} vs weights {W.shape}")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidArgumentError(f"layer {i}: input width does not chain")
        if self.in_mean.shape != (sizes[0],) or self.in_std.shape != (sizes[0],):
            raise InvalidArgumentError("input normalization stats do not match input width")
        if self.out_mean.shape != (sizes[-1],) or self.out_std.shape != (sizes[-1],):
            raise InvalidArgumentError("output normalization stats do not match output width")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                   self.in_mean.copy(), self.in_std.copy(),
                   self.out_mean.copy(), self.out_std.copy())

    def params(self) -> list:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def normalize_inputs(self, X):
        return (X - self.in_mean) / self.in_std

    def denormalize_inputs(self, Xn):
        return Xn * self.in_std + self.in_mean

    def normalize_outputs(self, Y):
        return (Y - self.out_mean) / self.out_std

    def denormalize_outputs(self, Yn):
        return Yn * self.out_std + self.out_mean


def init_mlp(layer_sizes, seed=0) -> Mlp:
    """Glorot-uniform weights, zero biases and identity normalization."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise InvalidArgumentError(f"invalid layer sizes {layer_sizes}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases, np.zeros(sizes[0]), np.ones(sizes[0]),
               np.zeros(sizes[-1]), np.ones(sizes[-1]))


def feature_stats(X: np.ndarray):
    """Per-column mean and standard deviation; zero spreads are replaced by 1."""
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.n_inputs:
        raise InvalidArgumentError(
            f"expected inputs of width {net.n_inputs}, got shape {x.shape}")
    return X, single


def _forward_normalized(net: Mlp, Xn: np.ndarray):
    acts = [Xn]
    a = Xn
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W.T + b
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts


def forward(net: Mlp, x) -> np.ndarray:
    """Network output for one feature vector or a batch (rows)."""
    X, single = _as_batch(net, x)
    Yn = _forward_normalized(net, net.normalize_inputs(X))[-1]
    Y = net.denormalize_outputs(Yn)
    if not np.all(np.isfinite(Y)):
        raise NumericError("network produced non-finite outputs")
    return Y[0] if single else Y


def _output_grad(net: Mlp, Yn, Y, loss):
    """Loss value and its gradient with respect to the normalized outputs."""
    B = Yn.shape[0]
    if loss == "mse":
        diff = Yn - net.normalize_outputs(Y)
        return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
    if loss == "arc":
        if Yn.shape[1] != 2:
            raise InvalidArgumentError("arc loss needs a two-column (cos, sin) output")
        P = net.denormalize_outputs(Yn)
        pred = np.arctan2(P[:, 1], P[:, 0])
        true = np.arctan2(Y[:, 1], Y[:, 0])
        delta = np.mod(pred - true + np.pi, 2 * np.pi) - np.pi
        r2 = P[:, 0] ** 2 + P[:, 1] ** 2
        if np.any(r2 == 0):
            raise NumericError("arc loss undefined for a zero output vector")
        g = 2.0 * delta / B
        dP = np.stack([-g * P[:, 1] / r2, g * P[:, 0] / r2], axis=1)
        return float(np.mean(delta ** 2)), dP * net.out_std
    raise InvalidArgumentError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def loss_and_gradient(net: Mlp, X, Y, loss: str = "mse"):
    """Batch loss and gradients ``[dW0, db0, dW1, db1, ...]``.

    With ``loss="mse"`` the value is the mean squared error over batch rows and
    output components, in normalized output space. ``loss="arc"`` treats a
    two-column output as a point on the circle and averages squared arc-length
    errors against targets given as ``(cos, sin)`` rows.
    """
    X, _ = _as_batch(net, X)
    if len(X) == 0:
        raise InvalidArgumentError("empty batch")
    Y = np.asarray(Y, dtype=float).reshape(len(X), -1)
    if Y.shape[1] != net.n_outputs:
        raise InvalidArgumentError(f"expected targets of width {net.n_outputs}, got {Y.shape[1]}")
    acts = _forward_normalized(net, net.normalize_inputs(X))
    if not np.all(np.isfinite(acts[-1])):
        raise NumericError("non-finite values in the forward pass")
    value, delta = _output_grad(net, acts[-1], Y, loss)
    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = delta.T @ acts[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            delta = (delta @ net.weights[i]) * (acts[i] > 0)
    return value, grads


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 2000
    patience: int = 20
    val_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise InvalidArgumentError("val_fraction must lie in (0, 1)")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidArgumentError("patience, batch_size and max_epochs must be >= 1")
        if self.learning_rate < 0:
            raise InvalidArgumentError("learning_rate must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainReport:
    epochs_run: int
    best_epoch: int
    best_val_mse: float
    train_history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs_run": self.epochs_run, "best_epoch": self.best_epoch,
                "best_val_mse": self.best_val_mse,
                "train_history": list(self.train_history),
                "val_history": list(self.val_history)}


def split_indices(n: int, val_fraction: float, rng: np.random.Generator):
    """Seeded shuffle; the last ``val_fraction`` of the shuffled rows is held out."""
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n - n_val < 1:
        raise TrainingError(
            f"cannot split {n} samples into nonempty training and validation sets "
            f"(val_fraction={val_fraction})")
    return order[: n - n_val], order[n - n_val:]


def train(net: Mlp, X, Y, cfg: TrainConfig = TrainConfig(), loss: str = "mse"):
    """Fit ``net`` on ``(X, Y)``; returns the best-validation model and a report.

    ``net`` itself is not modified. Its weights are the starting point; its
    normalization statistics are replaced by those of the training split.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(len(X), -1)
    if len(X) == 0:
        raise TrainingError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    tr, va = split_indices(len(X), cfg.val_fraction, rng)
    Xtr, Ytr, Xva, Yva = X[tr], Y[tr], X[va], Y[va]

    model = net.copy()
    model.in_mean, model.in_std = feature_stats(Xtr)
    if loss == "mse":
        model.out_mean, model.out_std = feature_stats(Ytr)
    params = model.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    best, best_val, best_epoch, stale = model.copy(), np.inf, 0, 0
    train_hist, val_hist = [], []
    n = len(Xtr)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value, grads = loss_and_gradient(model, Xtr[idx], Ytr[idx], loss)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            total += value * len(idx)
            step += 1
            lr_t = cfg.learning_rate * np.sqrt(1 - cfg.beta2 ** step) / (1 - cfg.beta1 ** step)
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= cfg.beta1
                mi += (1 - cfg.beta1) * g
                vi *= cfg.beta2
                vi += (1 - cfg.beta2) * g * g
                p -= lr_t * mi / (np.sqrt(vi) + cfg.epsilon)
        val = evaluate_loss(model, Xva, Yva, loss)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        train_hist.append(total / n)
        val_hist.append(val)
        if val < best_val:
            best, best_val, best_epoch, stale = model.copy(), val, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, TrainReport(len(val_hist), best_epoch, float(best_val), train_hist, val_hist)


def evaluate_loss(net: Mlp, X, Y, loss: str = "mse") -> float:
    X, _ = _as_batch(net, X)
    Y = np.asarray(Y, dtype=float).reshape(len(X), -1)
    Yn = _forward_normalized(net, net.normalize_inputs(X))[-1]
    return _output_grad(net, Yn, Y, loss)[0]


# ---------------------------------------------------------------------------
# Model files: magic "RSNN", little-endian.

MODEL_MAGIC = b"RSNN"
MODEL_VERSION = 1


def dumps_mlp(net: Mlp) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_VERSION, len(net.weights)))
    for W, b in zip(net.weights, net.biases):
        buf.write(struct.pack("<II", *W.shape))
        buf.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    for stat in (net.in_mean, net.in_std, net.out_mean, net.out_std):
        buf.write(np.ascontiguousarray(stat, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what}: needed {n} more bytes", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(float)

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes in {self.what}", self.pos)


def loads_mlp(data: bytes) -> Mlp:
    r = _Reader(data, "model file")
    magic = r.take(4)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}", 0)
    version, n_layers = r.unpack("<II")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model format version {version}", 4)
    if n_layers < 1:
        raise FormatError("model has no layers", 8)
    weights, biases = [], []
    for _ in range(n_layers):
        rows, cols = r.unpack("<II")
        weights.append(r.floats(rows * cols).reshape(rows, cols))
        biases.append(r.floats(rows))
    n_in, n_out = weights[0].shape[1], weights[-1].shape[0]
    stats = [r.floats(n_in), r.floats(n_in), r.floats(n_out), r.floats(n_out)]
    r.finish()
    try:
        return Mlp(weights, biases, *stats)
    except InvalidArgumentError as exc:
        raise FormatError(f"inconsistent model file: {exc}") from exc


def save_mlp(net: Mlp, path) -> None:
    Path(path).write_bytes(dumps_mlp(net))


def load_mlp(path) -> Mlp:
    return loads_mlp(Path(path).read_bytes())


# ---------------------------------------------------------------------------


class MlpRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn compatible wrapper around :func:`train` and :func:`forward`.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the ReLU layers; a linear output layer is appended.
    loss : {"mse", "arc"}
    batch_size, learning_rate, beta1, beta2, epsilon, max_epochs, patience,
    val_fraction, random_state
        Forwarded to :class:`TrainConfig`. ``random_state`` seeds weight
        initialization, the validation split and the batch order.
    """

    def __init__(self, hidden_layer_sizes=(64, 64), loss="mse", batch_size=64,
                 learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 max_epochs=2000, patience=20, val_fraction=0.15, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.loss = loss
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.learning_rate, self.beta1, self.beta2,
                           self.epsilon, self.max_epochs, self.patience, self.val_fraction,
                           int(self.random_state))

    def initial_net(self, n_inputs: int, n_outputs: int) -> Mlp:
        sizes = (n_inputs, *self.hidden_layer_sizes, n_outputs)
        return init_mlp(sizes, np.random.SeedSequence([int(self.random_state), 1]))

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64, y_numeric=True)
        Y = y.reshape(len(X), -1)
        self._single_output = y.ndim == 1
        net = self.initial_net(X.shape[1], Y.shape[1])
        self.net_, self.report_ = train(net, X, Y, self.train_config(), self.loss)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        Y = forward(self.net_, X)
        return Y[:, 0] if getattr(self, "_single_output", False) else Y

    @classmethod
    def from_net(cls, net: Mlp, **params) -> "MlpRegressor":
        """Wrap an already trained network."""
        est = cls(hidden_layer_sizes=tuple(net.layer_sizes[1:-1]), **params)
        est.net_ = net
        est.n_features_in_ = net.n_inputs
        est._single_output = False
        return est


def with_stats(net: Mlp, **stats) -> Mlp:
    """Copy of ``net`` with some normalization statistics replaced."""
    return replace(net.copy(), **{k: np.asarray(v, dtype=float) for k, v in stats.items()})
