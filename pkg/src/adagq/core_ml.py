"""Small differentiable classifiers over a flat weight vector.

Weights are stored flat in canonical order: layer by layer, each layer as its
weight matrix (fan_in x fan_out, row-major) followed by its bias. Codec
indices refer to positions in this vector, so the order is part of the wire
contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LR_INITIAL = 0.01
LR_DECAY = 0.995


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ConfigurationError("batch needs a non-empty 2-D feature matrix")
        if len(self.labels) != len(self.features):
            raise ConfigurationError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )


@dataclass
class Model:
    kind: str
    input_dim: int
    n_classes: int
    hidden: tuple[int, ...] = ()
    weights: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.kind not in ("logistic_regression", "mlp"):
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.kind == "logistic_regression":
            self.hidden = ()
        elif not self.hidden:
            raise ConfigurationError("mlp needs at least one hidden layer")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.weights is None:
            self.weights = np.zeros(self.num_params)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.num_params,):
            raise ConfigurationError(
                f"weights have shape {self.weights.shape}, architecture needs ({self.num_params},)"
            )

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.n_classes]

    @property
    def num_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    def layers(self, flat: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (W, b) into ``flat`` (defaults to this model's weights)."""
        flat = self.weights if flat is None else flat
        out = []
        offset = 0
        sizes = self.layer_sizes
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = flat[offset : offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    def with_weights(self, weights: np.ndarray) -> Model:
        return Model(self.kind, self.input_dim, self.n_classes, self.hidden, weights)

    def copy(self) -> Model:
        return self.with_weights(self.weights.copy())


def init_model(
    kind: str,
    input_dim: int,
    n_classes: int,
    hidden: tuple[int, ...] = (64,),
    rng: np.random.Generator | None = None,
) -> Model:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    rng = np.random.default_rng(0) if rng is None else rng
    model = Model(kind, input_dim, n_classes, hidden if kind == "mlp" else ())
    for w, b in model.layers():
        bound = 1.0 / np.sqrt(w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return model


def _check(model: Model, batch: Batch) -> None:
    if batch.features.shape[1] != model.input_dim:
        raise ConfigurationError(
            f"batch has {batch.features.shape[1]} features, model expects {model.input_dim}"
        )
    labels = batch.labels
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ConfigurationError(f"labels must lie in [0, {model.n_classes})")


def _forward(model: Model, x: np.ndarray):
    acts = [x]
    pre = []
    layers = model.layers()
    a = x
    for w, b in layers[:-1]:
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0)
        acts.append(a)
    w, b = layers[-1]
    logits = a @ w + b
    return logits, acts, pre


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_loss(model: Model, batch: Batch) -> float:
    """Mean cross-entropy of the batch."""
    _check(model, batch)
    logits, _, _ = _forward(model, batch.features)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(batch.labels)), batch.labels].mean())


def gradient(model: Model, batch: Batch) -> np.ndarray:
    """Analytic gradient of :func:`forward_loss`, flattened canonically."""
    _check(model, batch)
    n = len(batch.labels)
    logits, acts, pre = _forward(model, batch.features)
    probs = np.exp(_log_softmax(logits))
    delta = probs
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grad = np.empty_like(model.weights)
    grad_layers = model.layers(grad)
    layers = model.layers()
    for idx in range(len(layers) - 1, -1, -1):
        gw, gb = grad_layers[idx]
        gw[...] = acts[idx].T @ delta
        gb[...] = delta.sum(axis=0)
        if idx > 0:
            delta = (delta @ layers[idx][0].T) * (pre[idx - 1] > 0)
    return grad


def sgd_step(model: Model, g: np.ndarray, lr: float) -> Model:
    if lr < 0:
        raise ConfigurationError("learning rate must be non-negative")
    g = np.asarray(g, dtype=np.float64)
    if g.shape != model.weights.shape:
        raise ConfigurationError(f"gradient shape {g.shape} != weights {model.weights.shape}")
    return model.with_weights(model.weights - lr * g)


def lr_at_round(k: int, initial: float = LR_INITIAL, decay: float = LR_DECAY) -> float:
    if k < 0:
        raise ValueError("round index must be >= 0")
    return initial * decay**k


def train_epoch(
    model: Model,
    features: np.ndarray,
    labels: np.ndarray,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> Model:
    """One shuffled pass of minibatch SGD; the final short batch is kept."""
    order = rng.permutation(len(labels))
    w = model.weights.copy()
    work = model.with_weights(w)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        g = gradient(work, Batch(features[idx], labels[idx]))
        w -= lr * g
    return work


def evaluate(model: Model, features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Mean cross-entropy and argmax accuracy over the whole set."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    batch = Batch(features, labels)
    _check(model, batch)
    logits, _, _ = _forward(model, features)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    acc = float((logits.argmax(axis=1) == labels).mean())
    return loss, acc
