"""Polynomial-kernel SVM on Tensor Sketch features.

The feature map approximates ``k(x, z) = (gamma * x.z + c0) ** d``. Inputs are
scaled by sqrt(gamma) and augmented with a constant sqrt(c0), so the kernel
becomes a plain ``(x'.z') ** d``. That is sketched as the circular convolution
(via FFT) of ``d`` independent count sketches. Each count sketch uses a
2-wise independent bucket hash and sign hash of the form
``((a * i + b) mod p) mod m``.

Training is mini-batch Pegasos on the weighted hinge loss. A 1-d logistic
calibration of the training margins then turns decisions into probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import minimize

from ..dataset import shuffled_batches
from ..errors import MammoscreenError, SingleClassDataset, WidthMismatch
from ..numcore import History, StopRule, sigmoid
from ._data import as_xy

PRIME = 2_147_483_647  # 2**31 - 1


class BadDegree(MammoscreenError, ValueError):
    pass


def poly_kernel(X, Z, gamma: float, c0: float, degree: int) -> np.ndarray:
    """Exact kernel matrix (gamma * X Z^T + c0) ** degree."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    return (gamma * X @ Z.T + c0) ** degree


@dataclass
class TensorSketch:
    gamma: float
    c0: float
    degree: int
    dim: int
    seed: int
    # One (a_bucket, b_bucket, a_sign, b_sign) row per degree.
    hashes: np.ndarray = field(default=None, repr=False)
    _tables: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.degree < 1:
            raise BadDegree(f"degree must be >= 1, got {self.degree}")
        if self.dim < 1:
            raise ValueError(f"sketch dimension must be >= 1, got {self.dim}")
        if self.gamma < 0 or self.c0 < 0:
            raise ValueError("gamma and c0 must be non-negative")
        if self.hashes is None:
            rng = np.random.default_rng(self.seed)
            a = rng.integers(1, PRIME, size=(self.degree, 2))
            b = rng.integers(0, PRIME, size=(self.degree, 2))
            self.hashes = np.stack([a[:, 0], b[:, 0], a[:, 1], b[:, 1]], axis=1)
        self.hashes = np.asarray(self.hashes, dtype=np.int64).reshape(self.degree, 4)

    def count_sketch_matrices(self, width: int) -> list[sparse.csr_matrix]:
        """Per-degree (width x dim) matrices with one signed 1 per row."""
        if width not in self._tables:
            i = np.arange(width, dtype=np.int64)
            tables = []
            for a_h, b_h, a_s, b_s in self.hashes:
                bucket = ((a_h * i + b_h) % PRIME) % self.dim
                sign = 2.0 * (((a_s * i + b_s) % PRIME) % 2) - 1.0
                tables.append(sparse.csr_matrix((sign, (i, bucket)), shape=(width, self.dim)))
            self._tables[width] = tables
        return self._tables[width]

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        n = X.shape[0]
        augmented = np.hstack([math.sqrt(self.gamma) * X, np.full((n, 1), math.sqrt(self.c0))])
        product = None
        for hashed in self.count_sketch_matrices(augmented.shape[1]):
            sketch = np.asarray((hashed.T @ augmented.T).T)
            spectrum = np.fft.rfft(sketch, axis=1)
            product = spectrum if product is None else product * spectrum
        return np.fft.irfft(product, n=self.dim, axis=1)


def sketch_fit(gamma: float, c0: float, degree: int, dim: int, seed: int) -> TensorSketch:
    return TensorSketch(gamma, c0, degree, dim, seed)


@dataclass
class SketchSVM:
    sketch: TensorSketch
    w: np.ndarray
    b: float
    lam: float
    calibration: tuple[float, float] = (1.0, 0.0)  # (a, c)
    C: float = 1.0
    class_weights: tuple[float, float] = (1.0, 1.0)
    n_features: int | None = None

    def _features(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.n_features is not None and X.shape[1] != self.n_features:
            raise WidthMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        return self.sketch.transform(X)

    def decision_function(self, X) -> np.ndarray:
        return self._features(X) @ self.w + self.b

    def predict_proba(self, X) -> np.ndarray:
        a, c = self.calibration
        return sigmoid(a * self.decision_function(X) + c)


def fit_calibration(scores: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Platt scaling: logistic fit of labels on scores with smoothed targets."""
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    target = np.where(y == 1, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))

    def loss(params):
        z = params[0] * scores + params[1]
        value = np.sum(target * np.logaddexp(0.0, -z) + (1 - target) * np.logaddexp(0.0, z))
        r = sigmoid(z) - target
        return value, np.array([r @ scores, r.sum()])

    prior = math.log((n_pos + 1.0) / (n_neg + 1.0))
    result = minimize(loss, x0=np.array([1.0, prior]), jac=True, method="BFGS")
    return float(result.x[0]), float(result.x[1])


def hinge(margins: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - margins)


def svm_train(
    data,
    C: float = 1.0,
    gamma: float = 1.0 / 1002,
    c0: float = 1.0,
    degree: int = 3,
    dim: int = 512,
    class_weights: tuple[float, float] = (1.0, 1.0),
    stop: StopRule = StopRule(max_iters=1000),
    seed: int = 0,
    batch_size: int = 64,
) -> tuple[SketchSVM, History]:
    """Pegasos on lam/2 ||w||^2 + mean weighted hinge, lam = 1 / (n C).

    The bias is trained as the weight of a constant feature. The step size is
    1 / (lam t), and iterates are projected onto the ball of radius
    sqrt(2 mean_weight / lam), which contains the optimum. The returned
    weights average the second half of the iterates.
    """
    X, y01 = as_xy(data)
    if y01.min() == y01.max():
        raise SingleClassDataset("SVM training needs both classes")
    sketch = sketch_fit(gamma, c0, degree, dim, seed)
    features = np.hstack([sketch.transform(X), np.ones((len(X), 1))])
    y = 2.0 * y01 - 1.0
    weights = np.where(y01 == 1, class_weights[1], class_weights[0]).astype(np.float64)
    n = len(y)
    lam = 1.0 / (n * C)
    radius = math.sqrt(2.0 * weights.mean() / lam)

    w = np.zeros(features.shape[1])
    average = np.zeros_like(w)
    averaged = 0
    history = History()
    batches = shuffled_batches(n, min(batch_size, n), seed=seed + 1)
    start_average = stop.max_iters // 2 + 1
    for t in range(1, stop.max_iters + 1):
        idx = next(batches)
        phi, yb, cb = features[idx], y[idx], weights[idx]
        margins = yb * (phi @ w)
        history.train_loss.append(float(0.5 * lam * w @ w + np.mean(cb * hinge(margins))))
        violated = margins < 1.0
        step = 1.0 / (lam * t)
        w *= 1.0 - step * lam
        if violated.any():
            w += (step / len(idx)) * ((cb[violated] * yb[violated]) @ phi[violated])
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm
        if t >= start_average:
            averaged += 1
            average += (w - average) / averaged
    final = average if averaged else w

    model = SketchSVM(sketch, final[:-1].copy(), float(final[-1]), lam, (1.0, 0.0), C, tuple(class_weights), X.shape[1])
    model.calibration = fit_calibration(features @ final, y01)
    return model, history


def svm_predict_proba(model: SketchSVM, X) -> np.ndarray:
    return model.predict_proba(X)
