"""Desk-scale models: flat parameter vectors, analytic gradients, local SGD.

Models are kept deliberately small (linear regression and a one-hidden-layer
tanh MLP) with hand-coded per-sample gradients. Parameters live in a single
flat float64 sequence; layer boundaries are metadata only, because
aggregation and encryption downstream operate on flat spans.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Layout = tuple[tuple[str, tuple[int, ...]], ...]

LINEAR = "linear-regression"
MLP = "mlp-1-hidden"
MSE = "mean-squared-error"
BCE = "binary-cross-entropy"

_KINDS = (LINEAR, MLP)
_LOSSES = (MSE, BCE)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture + loss. ``hidden_dim`` is ignored for linear models."""

    kind: str = LINEAR
    input_dim: int = 32
    hidden_dim: int = 16
    loss: str = MSE
    include_bias: bool = True

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown model kind: {self.kind!r}")
        if self.loss not in _LOSSES:
            raise ValueError(f"unknown loss: {self.loss!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.kind == MLP and self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive for the MLP")

    @property
    def layout(self) -> Layout:
        d, h = self.input_dim, self.hidden_dim
        if self.kind == LINEAR:
            parts = [("weights", (d,))]
            if self.include_bias:
                parts.append(("bias", (1,)))
        else:
            parts = [("hidden_weights", (h, d)), ("output_weights", (h,))]
            if self.include_bias:
                parts.insert(1, ("hidden_bias", (h,)))
                parts.append(("output_bias", (1,)))
        return tuple(parts)

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout)


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    batch_size: int = 8
    epochs_per_round: int = 4

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_per_round < 0:
            raise ValueError("epochs_per_round must be >= 0")


@dataclass
class ParameterVector:
    """Flat model parameters plus the (layer-name, shape) map of the flat span."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("parameter values must be a flat vector")
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.values.shape[0] != expected:
            raise ValueError(
                f"layout describes {expected} parameters, got {self.values.shape[0]}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter values must be finite")

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)


def _views(model: ParameterVector) -> dict[str, np.ndarray]:
    """Reshaped views of each layer in the flat vector."""
    out, offset = {}, 0
    for name, shape in model.layout:
        size = int(np.prod(shape))
        out[name] = model.values[offset : offset + size].reshape(shape)
        offset += size
    return out


def init_model(spec: ModelSpec, rng: np.random.Generator | None = None) -> ParameterVector:
    """Zero init for linear models; scaled normal init for the MLP."""
    if spec.kind == LINEAR:
        return ParameterVector(np.zeros(spec.num_params), spec.layout)
    if rng is None:
        raise ValueError("MLP init requires a generator")
    d, h = spec.input_dim, spec.hidden_dim
    values = []
    for name, shape in spec.layout:
        size = int(np.prod(shape))
        if name == "hidden_weights":
            values.append(rng.normal(0.0, 1.0 / np.sqrt(d), size))
        elif name == "output_weights":
            values.append(rng.normal(0.0, 1.0 / np.sqrt(h), size))
        else:
            values.append(np.zeros(size))
    return ParameterVector(np.concatenate(values), spec.layout)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(model: ParameterVector, spec: ModelSpec, X: np.ndarray):
    """Return (prediction, hidden activation or None). Prediction is the
    raw output for MSE and the sigmoid probability for BCE."""
    v = _views(model)
    if spec.kind == LINEAR:
        z = X @ v["weights"]
        if spec.include_bias:
            z = z + v["bias"][0]
        a1 = None
    else:
        z1 = X @ v["hidden_weights"].T
        if spec.include_bias:
            z1 = z1 + v["hidden_bias"]
        a1 = np.tanh(z1)
        z = a1 @ v["output_weights"]
        if spec.include_bias:
            z = z + v["output_bias"][0]
    if spec.loss == BCE:
        return _sigmoid(z), a1
    return z, a1


def predict(model: ParameterVector, spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    X = _check_batch(spec, X)
    return _forward(model, spec, X)[0]


def _check_batch(spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(
            f"feature matrix must be (batch, {spec.input_dim}), got {X.shape}"
        )
    return X


def per_sample_losses(
    model: ParameterVector, spec: ModelSpec, X: np.ndarray, y: np.ndarray
) -> np.ndarray:
    X = _check_batch(spec, X)
    y = np.asarray(y, dtype=np.float64).ravel()
    pred, _ = _forward(model, spec, X)
    if spec.loss == MSE:
        return 0.5 * (pred - y) ** 2
    p = np.clip(pred, 1e-12, 1.0 - 1e-12)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def gradient_matrix(
    model: ParameterVector, spec: ModelSpec, X: np.ndarray, y: np.ndarray
) -> np.ndarray:
    """Per-sample gradients stacked as a (batch, num_params) matrix.

    For both losses the error signal at the output is (prediction - target):
    d/dz 0.5*(z-y)^2 = z - y, and d/dz BCE(sigmoid(z), y) = sigmoid(z) - y.
    """
    X = _check_batch(spec, X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if y.shape[0] != X.shape[0]:
        raise ValueError("feature/target counts differ")
    pred, a1 = _forward(model, spec, X)
    r = pred - y
    if spec.kind == LINEAR:
        parts = [r[:, None] * X]
        if spec.include_bias:
            parts.append(r[:, None])
    else:
        v = _views(model)
        w2 = v["output_weights"]
        delta1 = r[:, None] * w2[None, :] * (1.0 - a1**2)  # (B, h)
        g_w1 = delta1[:, :, None] * X[:, None, :]  # (B, h, d)
        parts = [g_w1.reshape(X.shape[0], -1)]
        if spec.include_bias:
            parts.append(delta1)
        parts.append(r[:, None] * a1)
        if spec.include_bias:
            parts.append(r[:, None])
    return np.concatenate(parts, axis=1)


def per_sample_gradients(
    model: ParameterVector, spec: ModelSpec, X: np.ndarray, y: np.ndarray
) -> list[ParameterVector]:
    """One gradient vector per sample, each with the model's layout."""
    G = gradient_matrix(model, spec, X, y)
    return [ParameterVector(G[i], model.layout) for i in range(G.shape[0])]


def sgd_step(
    model: ParameterVector, gradients: list[ParameterVector], config: SgdConfig
) -> ParameterVector:
    """model - learning_rate * mean(gradients)."""
    if len(gradients) == 0:
        raise ValueError("sgd_step needs at least one gradient")
    for g in gradients:
        if g.layout != model.layout:
            raise ValueError("gradient layout does not match the model")
    mean = np.mean([g.values for g in gradients], axis=0)
    return ParameterVector(model.values - config.learning_rate * mean, model.layout)


def _batch_stream(n: int, batch_size: int, shuffle_rng: np.random.Generator):
    """Yield index batches forever, reshuffling at every epoch boundary."""
    while True:
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def _apply_privacy(grads, privacy, noise_rng):
    if privacy is None or privacy.mode == "none":
        return grads
    # local import keeps params importable on its own
    from . import privacy as priv

    if privacy.mode == "gaussian-noise":
        return priv.clip_and_noise(grads, privacy, noise_rng)
    return priv.non_unique_gradients(grads, privacy.alpha).gradients


def local_train(
    model: ParameterVector,
    spec: ModelSpec,
    dataset,
    config: SgdConfig,
    privacy=None,
    *,
    shuffle_rng: np.random.Generator,
    noise_rng: np.random.Generator | None = None,
) -> tuple[ParameterVector, list[float]]:
    """Run ``epochs_per_round`` passes of mini-batch SGD over the dataset.

    Returns the updated model and the mean (pre-update) training loss of each
    epoch. With a privacy config, per-sample gradients pass through the
    configured transform before the step.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset must be non-empty")
    stream = _batch_stream(n, config.batch_size, shuffle_rng)
    batches_per_epoch = -(-n // config.batch_size)
    epoch_losses: list[float] = []
    for _ in range(config.epochs_per_round):
        losses = []
        for _ in range(batches_per_epoch):
            idx = next(stream)
            Xb, yb = dataset.features[idx], dataset.targets[idx]
            losses.append(float(np.mean(per_sample_losses(model, spec, Xb, yb))))
            grads = per_sample_gradients(model, spec, Xb, yb)
            grads = _apply_privacy(grads, privacy, noise_rng)
            model = sgd_step(model, grads, config)
        epoch_losses.append(float(np.mean(losses)))
    return model, epoch_losses


def train_steps(
    model: ParameterVector,
    spec: ModelSpec,
    dataset,
    n_steps: int,
    config: SgdConfig,
    privacy=None,
    *,
    shuffle_rng: np.random.Generator,
    noise_rng: np.random.Generator | None = None,
) -> ParameterVector:
    """Take exactly ``n_steps`` mini-batch steps, cycling epochs as needed.

    Consumes the shuffle stream identically to ``local_train``, so k whole
    epochs of steps reproduce ``local_train`` bit for bit.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset must be non-empty")
    stream = _batch_stream(n, config.batch_size, shuffle_rng)
    for _ in range(n_steps):
        idx = next(stream)
        Xb, yb = dataset.features[idx], dataset.targets[idx]
        grads = per_sample_gradients(model, spec, Xb, yb)
        grads = _apply_privacy(grads, privacy, noise_rng)
        model = sgd_step(model, grads, config)
    return model


def evaluate(model: ParameterVector, spec: ModelSpec, dataset) -> dict[str, float]:
    """MAE for regression specs; accuracy and AUC for classification specs."""
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    pred = predict(model, spec, dataset.features)
    y = dataset.targets
    if spec.loss == MSE:
        return {"mae": float(np.mean(np.abs(pred - y)))}
    acc = float(np.mean((pred >= 0.5) == (y >= 0.5)))
    return {"accuracy": acc, "auc": _rank_auc(y, pred)}


def _rank_auc(y: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC; nan when only one class is present."""
    pos = scores[y >= 0.5]
    neg = scores[y < 0.5]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    order = np.argsort(np.concatenate([neg, pos]), kind="mergesort")
    ranks = np.empty(len(order))
    ranks[order] = np.arange(1, len(order) + 1)
    # average ranks for ties
    allscores = np.concatenate([neg, pos])
    for val in np.unique(allscores):
        mask = allscores == val
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    r_pos = ranks[len(neg) :].sum()
    u = r_pos - len(pos) * (len(pos) + 1) / 2
    return float(u / (len(pos) * len(neg)))
