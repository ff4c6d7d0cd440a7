"""L2-regularized, class-weighted logistic regression trained with full-batch Adam."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import SingleClassDataset, WidthMismatch
from ..numcore import AdamState, History, StopRule, adam_step, sigmoid
from ._data import as_xy


@dataclass
class LogisticModel:
    w: np.ndarray
    w0: float
    C: float = 1.0
    class_weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.C <= 0:
            raise ValueError("C must be positive")
        if not (np.all(np.isfinite(self.w)) and np.isfinite(self.w0)):
            raise ValueError("non-finite logistic parameters")

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.w.size:
            raise WidthMismatch(f"expected {self.w.size} features, got {X.shape[1]}")
        return X @ self.w + self.w0

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.decision_function(X))


def _nll(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.where(y == 1, np.logaddexp(0.0, -z), np.logaddexp(0.0, z))


def objective(w: np.ndarray, w0: float, X: np.ndarray, y: np.ndarray, C: float, class_weights) -> float:
    """C * sum of weighted negative log-likelihoods + 0.5 * ||w||^2 (bias unpenalized)."""
    weights = np.where(y == 1, class_weights[1], class_weights[0])
    return float(C * np.sum(weights * _nll(X @ w + w0, y)) + 0.5 * w @ w)


def lr_train(
    data,
    C: float = 1.0,
    class_weights: tuple[float, float] = (1.0, 1.0),
    stop: StopRule = StopRule(max_iters=1000),
    lr: float = 0.05,
    tol: float = 1e-6,
) -> tuple[LogisticModel, History]:
    """Minimize the weighted objective from w = 0, w0 = 0.

    Stops when the gradient's infinity norm drops below ``tol`` or after
    ``stop.max_iters`` steps. The lowest-objective iterate is returned, so the
    result is never worse than the zero model. ``history.train_loss[k]`` is
    the objective before step k + 1.
    """
    X, y = as_xy(data)
    if y.min() == y.max():
        raise SingleClassDataset("logistic regression needs both classes")
    weights = np.where(y == 1, class_weights[1], class_weights[0]).astype(np.float64)
    w = np.zeros(X.shape[1])
    w0 = np.zeros(1)
    adam = AdamState(lr=lr)
    history = History()
    best = (np.inf, w.copy(), 0.0)
    for step in range(stop.max_iters + 1):
        z = X @ w + w0[0]
        value = float(C * np.sum(weights * _nll(z, y)) + 0.5 * w @ w)
        if value < best[0]:
            best = (value, w.copy(), float(w0[0]))
        residual = C * weights * (sigmoid(z) - y)
        gw, gb = X.T @ residual + w, residual.sum()
        if step == stop.max_iters or max(np.abs(gw).max(), abs(gb)) < tol:
            break
        history.train_loss.append(value)
        adam_step(adam, [w, w0], [gw, np.array([gb])])
    return LogisticModel(best[1], best[2], C, tuple(class_weights)), history


def lr_predict_proba(model: LogisticModel, X) -> np.ndarray:
    return model.predict_proba(X)
