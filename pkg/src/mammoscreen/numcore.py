"""Small dense-network toolkit: layers, activations, weighted BCE, backprop, Adam.

Everything works on 2-D batches of shape ``(n, features)``; 1-D inputs are
treated as a batch of one. Gradients returned by ``backward`` are sums over
the batch of the upstream gradient, so the caller decides the scaling (BCE
gradients already carry the ``1/N``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Protocol, Sequence

import numpy as np

from .errors import LengthMismatch, MammoscreenError

PROB_CLAMP = 1e-7


class DimensionMismatch(MammoscreenError, ValueError):
    pass


class ShapeMismatch(MammoscreenError, ValueError):
    pass


class StaleCache(MammoscreenError, RuntimeError):
    pass


class Activation(str, enum.Enum):
    RELU = "ReLU"
    SIGMOID = "Sigmoid"
    NONE = "None"


def relu(z):
    return np.maximum(z, 0.0)


def sigmoid(z):
    """Logistic function, branching on sign so neither branch overflows."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return relu(z)
    if kind is Activation.SIGMOID:
        return sigmoid(z)
    return z


def _activation_grad(kind: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return (z > 0).astype(np.float64)
    if kind is Activation.SIGMOID:
        # sigmoid(z) * sigmoid(-z) stays positive where 1 - a rounds to 0.
        return a * sigmoid(-z)
    return np.ones_like(z)


@dataclass(eq=False)
class DenseLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: Activation = Activation.NONE
    generation: int = field(default=0, repr=False)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionMismatch(f"weights {self.W.shape} do not match bias {self.b.shape}")

    @classmethod
    def glorot(cls, fan_in: int, fan_out: int, activation: Activation, rng: np.random.Generator) -> DenseLayer:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return cls(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out), activation)

    @property
    def in_features(self) -> int:
        return self.W.shape[1]

    @property
    def out_features(self) -> int:
        return self.W.shape[0]

    @property
    def parameter_count(self) -> int:
        return self.W.size + self.b.size


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    generations: tuple[int, ...]
    layer_ids: tuple[int, ...]


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def forward(network: Sequence[DenseLayer], x) -> tuple[np.ndarray, ForwardCache]:
    """Run affine+activation layers in order; output is 2-D ``(n, out)``."""
    a = _as_batch(x)
    cache = ForwardCache(
        [], [], [], tuple(layer.generation for layer in network), tuple(id(layer) for layer in network)
    )
    for i, layer in enumerate(network):
        if a.shape[1] != layer.in_features:
            raise DimensionMismatch(f"layer {i} expects {layer.in_features} inputs, got {a.shape[1]}")
        z = a @ layer.W.T + layer.b
        cache.inputs.append(a)
        cache.pre.append(z)
        a = _activate(layer.activation, z)
        cache.post.append(a)
    return a, cache


def backward(
    network: Sequence[DenseLayer], cache: ForwardCache, grad_output
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact gradients ``[(dW, db), ...]`` of sum(grad_output * output)."""
    if cache.layer_ids != tuple(id(layer) for layer in network) or cache.generations != tuple(
        layer.generation for layer in network
    ):
        raise StaleCache("parameters changed since the forward pass")
    g = _as_batch(grad_output)
    if g.shape != cache.post[-1].shape:
        raise DimensionMismatch(f"upstream gradient {g.shape} vs output {cache.post[-1].shape}")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(network)  # type: ignore[list-item]
    for i in range(len(network) - 1, -1, -1):
        layer = network[i]
        dz = g * _activation_grad(layer.activation, cache.pre[i], cache.post[i])
        grads[i] = (dz.T @ cache.inputs[i], dz.sum(axis=0))
        g = dz @ layer.W
    return grads


class Model(Protocol):
    """What ``train_loop`` needs from a network."""

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, object]: ...

    def backward(self, cache: object, grad_output: np.ndarray) -> list[np.ndarray]: ...

    def parameters(self) -> list[np.ndarray]: ...

    def mark_updated(self) -> None: ...


class Sequential:
    """A chain of dense layers exposing the :class:`Model` interface."""

    def __init__(self, layers: Sequence[DenseLayer]):
        self.layers = list(layers)

    @classmethod
    def build(cls, widths: Sequence[int], activations: Sequence[Activation], rng: np.random.Generator) -> Sequential:
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        return cls([DenseLayer.glorot(i, o, a, rng) for i, o, a in zip(widths[:-1], widths[1:], activations)])

    def forward(self, X):
        return forward(self.layers, X)

    def predict(self, X) -> np.ndarray:
        return forward(self.layers, X)[0]

    def backward(self, cache, grad_output):
        return [g for pair in backward(self.layers, cache, grad_output) for g in pair]

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in (layer.W, layer.b)]

    def mark_updated(self) -> None:
        for layer in self.layers:
            layer.generation += 1

    @property
    def parameter_count(self) -> int:
        return sum(layer.parameter_count for layer in self.layers)


# Loss


@dataclass(frozen=True)
class LossSpec:
    class_weights: tuple[float, float] = (1.0, 1.0)  # (negative, positive)
    kind: str = "BCE"

    def __post_init__(self):
        w_neg, w_pos = self.class_weights
        if self.kind != "BCE":
            raise ValueError(f"unsupported loss {self.kind!r}")
        if w_neg < 0 or w_pos < 0 or (w_neg == 0 and w_pos == 0):
            raise ValueError(f"bad class weights {self.class_weights}")


def _loss_inputs(y_hat, y) -> tuple[np.ndarray, np.ndarray]:
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y_hat.shape != y.shape:
        raise LengthMismatch(f"{y_hat.size} predictions vs {y.size} labels")
    if y.size == 0:
        raise LengthMismatch("empty batch")
    return np.clip(y_hat, PROB_CLAMP, 1.0 - PROB_CLAMP), y


def bce_loss(y_hat, y, spec: LossSpec | None = None) -> float:
    """Mean of -[w_pos*y*log(p) + w_neg*(1-y)*log(1-p)] with p clamped to [1e-7, 1-1e-7]."""
    w_neg, w_pos = (spec or LossSpec()).class_weights
    p, y = _loss_inputs(y_hat, y)
    return float(-np.mean(w_pos * y * np.log(p) + w_neg * (1.0 - y) * np.log1p(-p)))


def bce_grad(y_hat, y, spec: LossSpec | None = None) -> np.ndarray:
    """d bce_loss / d y_hat, evaluated at the clamped probabilities."""
    w_neg, w_pos = (spec or LossSpec()).class_weights
    shape = np.shape(y_hat)
    p, y = _loss_inputs(y_hat, y)
    g = (-w_pos * y / p + w_neg * (1.0 - y) / (1.0 - p)) / y.size
    return g.reshape(shape)


# Optimizer


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0 and self.lr > 0):
            raise ValueError("invalid Adam hyperparameters")


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or any(p.shape != np.shape(g) for p, g in zip(params, grads)):
        raise ShapeMismatch("parameter and gradient shapes differ")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ShapeMismatch("optimizer state does not match parameters")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# Training


@dataclass(frozen=True)
class StopRule:
    max_iters: int = 1000
    patience: int | None = None  # in validation evaluations; None disables early stopping
    min_delta: float = 0.0


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[tuple[int, float]] = field(default_factory=list)  # (iteration, loss)
    stopped_early: bool = False

    @property
    def iterations(self) -> int:
        return len(self.train_loss)


def train_loop(
    model: Model,
    batches: Iterable[tuple[np.ndarray, np.ndarray]],
    loss: LossSpec,
    adam: AdamState,
    stop: StopRule,
    validation: tuple[np.ndarray, np.ndarray] | None = None,
    eval_every: int = 10,
    on_step: Callable[[int, float], None] | None = None,
) -> History:
    """Forward / BCE / backward / Adam for each batch until a stop condition.

    Validation loss (same loss spec) is recorded every ``eval_every``
    iterations; early stopping counts evaluations without an improvement of
    at least ``min_delta``.
    """
    history = History()
    best = math.inf
    stale = 0
    iterator: Iterator = iter(batches)
    for it in range(1, stop.max_iters + 1):
        try:
            X, y = next(iterator)
        except StopIteration:
            break
        out, cache = model.forward(X)
        history.train_loss.append(bce_loss(out, y, loss))
        grads = model.backward(cache, bce_grad(out, y, loss))
        adam_step(adam, model.parameters(), grads)
        model.mark_updated()
        if on_step is not None:
            on_step(it, history.train_loss[-1])
        if validation is not None and it % eval_every == 0:
            val = bce_loss(model.forward(validation[0])[0], validation[1], loss)
            history.val_loss.append((it, val))
            if val < best - stop.min_delta:
                best, stale = val, 0
            else:
                stale += 1
            if stop.patience and stale >= stop.patience:
                history.stopped_early = True
                break
    return history
