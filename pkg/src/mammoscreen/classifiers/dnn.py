"""Two-branch network: image features and (age, implant) metadata, fused to one probability.

Image branch: 1000 -> 100 (ReLU) -> 10 (ReLU) -> 1.
Metadata branch: 2 -> 2 (ReLU) -> 1.

Both branches end in a linear logit. The fusion step applies the branch
sigmoids itself, so every fusion rule can be differentiated from the logits
without dividing by a saturated ``s * (1 - s)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..dataset import N_IMAGE_FEATURES, shuffled_batches, stratified_batches
from ..errors import WidthMismatch
from ..numcore import (
    Activation,
    AdamState,
    DenseLayer,
    ForwardCache,
    History,
    LossSpec,
    StopRule,
    backward,
    forward,
    sigmoid,
    train_loop,
)
from ._data import as_xy

IMAGE_WIDTHS = (100, 10, 1)
META_WIDTHS = (2, 1)
N_META = 2


class Fusion(str, enum.Enum):
    MEAN = "Mean"  # (s_img + s_meta) / 2
    MEAN_THEN_SIGMOID = "MeanThenSigmoid"  # sigmoid((s_img + s_meta) / 2)
    LOGIT_SUM = "LogitSum"  # sigmoid(z_img + z_meta)


DEFAULT_FUSION = Fusion.LOGIT_SUM


class Sampling(str, enum.Enum):
    SHUFFLED = "shuffled"
    STRATIFIED = "stratified"


@dataclass
class DNNCache:
    image: ForwardCache
    meta: ForwardCache
    z_img: np.ndarray
    z_meta: np.ndarray
    fused: np.ndarray  # argument of the outer sigmoid (unused for Mean)
    out: np.ndarray


class TwoBranchDNN:
    def __init__(self, image_branch: list[DenseLayer], meta_branch: list[DenseLayer], fusion: Fusion | str = DEFAULT_FUSION):
        self.image_branch = list(image_branch)
        self.meta_branch = list(meta_branch)
        self.fusion = Fusion(fusion)
        if self.image_branch[-1].out_features != 1 or self.meta_branch[-1].out_features != 1:
            raise ValueError("each branch must end in a single logit")
        if self.meta_branch[0].in_features != N_META:
            raise ValueError(f"metadata branch takes {N_META} inputs")

    @property
    def image_features(self) -> int:
        return self.image_branch[0].in_features

    @property
    def n_features(self) -> int:
        return self.image_features + N_META

    @property
    def layers(self) -> list[DenseLayer]:
        return self.image_branch + self.meta_branch

    @property
    def layer_parameter_counts(self) -> list[int]:
        return [layer.parameter_count for layer in self.layers]

    @property
    def parameter_count(self) -> int:
        return sum(self.layer_parameter_counts)

    def _split(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise WidthMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        return X[:, : self.image_features], X[:, self.image_features :]

    def forward(self, X) -> tuple[np.ndarray, DNNCache]:
        x_img, x_meta = self._split(X)
        z_img, image_cache = forward(self.image_branch, x_img)
        z_meta, meta_cache = forward(self.meta_branch, x_meta)
        if self.fusion is Fusion.LOGIT_SUM:
            fused = z_img + z_meta
            out = sigmoid(fused)
        else:
            fused = 0.5 * (sigmoid(z_img) + sigmoid(z_meta))
            out = fused if self.fusion is Fusion.MEAN else sigmoid(fused)
        return out, DNNCache(image_cache, meta_cache, z_img, z_meta, fused, out)

    def predict(self, X) -> np.ndarray:
        return self.forward(X)[0][:, 0]

    predict_proba = predict

    def backward(self, cache: DNNCache, grad_output) -> list[np.ndarray]:
        g = np.asarray(grad_output, dtype=np.float64).reshape(cache.out.shape)
        if self.fusion is Fusion.LOGIT_SUM:
            d_img = d_meta = g * cache.out * sigmoid(-cache.fused)
        else:
            if self.fusion is Fusion.MEAN_THEN_SIGMOID:
                g = g * cache.out * sigmoid(-cache.fused)
            d_img = 0.5 * g * sigmoid(cache.z_img) * sigmoid(-cache.z_img)
            d_meta = 0.5 * g * sigmoid(cache.z_meta) * sigmoid(-cache.z_meta)
        grads = backward(self.image_branch, cache.image, d_img) + backward(self.meta_branch, cache.meta, d_meta)
        return [p for pair in grads for p in pair]

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in (layer.W, layer.b)]

    def mark_updated(self) -> None:
        for layer in self.layers:
            layer.generation += 1


def dnn_build(fusion: Fusion | str = DEFAULT_FUSION, seed: int = 0, image_features: int = N_IMAGE_FEATURES) -> TwoBranchDNN:
    """Glorot-uniform weights, zero biases. ``image_features`` < 1000 gives a narrow clone for testing."""
    rng = np.random.default_rng(seed)

    def branch(widths, n_in):
        layers = []
        for i, n_out in enumerate(widths):
            act = Activation.NONE if i == len(widths) - 1 else Activation.RELU
            layers.append(DenseLayer.glorot(n_in, n_out, act, rng))
            n_in = n_out
        return layers

    return TwoBranchDNN(branch(IMAGE_WIDTHS, image_features), branch(META_WIDTHS, N_META), fusion)


def dnn_predict(model: TwoBranchDNN, X) -> np.ndarray:
    return model.predict(X)


def _batches(X, y, index_iter: Iterator[np.ndarray]):
    for idx in index_iter:
        yield X[idx], y[idx]


def dnn_train(
    model: TwoBranchDNN,
    train,
    val=None,
    sampling: Sampling | str = Sampling.SHUFFLED,
    loss: LossSpec = LossSpec(),
    adam: AdamState | None = None,
    stop: StopRule = StopRule(max_iters=1000),
    batch_size: int = 256,
    seed: int = 0,
    eval_every: int = 10,
) -> tuple[TwoBranchDNN, History]:
    """Mini-batch training in place.

    The two usual regimes are shuffled batches with a class-weighted loss,
    and stratified batches with ``LossSpec()``. Any combination is accepted.
    """
    X, y = as_xy(train)
    batch_size = min(batch_size, len(y))
    if Sampling(sampling) is Sampling.STRATIFIED:
        index_iter = stratified_batches(y, batch_size, seed)
    else:
        index_iter = shuffled_batches(len(y), batch_size, seed)
    validation = as_xy(val) if val is not None else None
    history = train_loop(
        model, _batches(X, y, index_iter), loss, adam or AdamState(), stop, validation, eval_every
    )
    return model, history
