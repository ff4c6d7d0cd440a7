"""Probabilistic and thresholded classification metrics, AUROC, and comparison tables.

Any ratio with a zero denominator is reported as 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import LengthMismatch, MammoscreenError


class EmptyInput(MammoscreenError, ValueError):
    pass


class SingleClassInput(MammoscreenError, ValueError):
    pass


REPORT_COLUMNS = (
    "model", "pf1", "p_precision", "p_recall", "auroc", "accuracy", "precision", "recall", "f1",
    "tp", "fp", "tn", "fn", "n", "threshold",
)


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def _inputs(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size != y.size:
        raise LengthMismatch(f"{p.size} probabilities vs {y.size} labels")
    if p.size == 0:
        raise EmptyInput("no samples")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if np.isnan(p).any() or p.min() < 0 or p.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    return p, y.astype(bool)


def p_counts(probs, labels) -> tuple[float, float, float]:
    """(pTP, pFP, pFN): probability mass on positives, on negatives, and missing from positives."""
    p, y = _inputs(probs, labels)
    return float(p[y].sum()), float(p[~y].sum()), float((1.0 - p[y]).sum())


def p_precision(probs, labels) -> float:
    tp, fp, _ = p_counts(probs, labels)
    return _ratio(tp, tp + fp)


def p_recall(probs, labels) -> float:
    tp, _, fn = p_counts(probs, labels)
    return _ratio(tp, tp + fn)


def _harmonic(a: float, b: float) -> float:
    return _ratio(2.0 * a * b, a + b)


def p_f1(probs, labels) -> float:
    return _harmonic(p_precision(probs, labels), p_recall(probs, labels))


@dataclass(frozen=True)
class BinaryMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int


def binary_metrics(probs, labels, threshold: float = 0.5) -> BinaryMetrics:
    p, y = _inputs(probs, labels)
    pred = p >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return BinaryMetrics(precision, recall, _harmonic(precision, recall), (tp + tn) / y.size, tp, fp, tn, fn)


def auroc(probs, labels) -> float:
    """Mann-Whitney U over average ranks, so ties count one half."""
    p, y = _inputs(probs, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("AUROC needs both classes")
    ranks = rankdata(p)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class EvalReport:
    pf1: float
    p_precision: float
    p_recall: float
    auroc: float | None  # None when the sample holds a single class
    accuracy: float
    binary_precision: float
    binary_recall: float
    binary_f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    n: int
    threshold: float

    def row(self, model: str) -> dict:
        return {
            "model": model, "pf1": self.pf1, "p_precision": self.p_precision, "p_recall": self.p_recall,
            "auroc": "" if self.auroc is None else self.auroc, "accuracy": self.accuracy,
            "precision": self.binary_precision, "recall": self.binary_recall, "f1": self.binary_f1,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn, "n": self.n, "threshold": self.threshold,
        }


def evaluate(probs, labels, threshold: float = 0.5) -> EvalReport:
    precision, recall = p_precision(probs, labels), p_recall(probs, labels)
    b = binary_metrics(probs, labels, threshold)
    try:
        area = auroc(probs, labels)
    except SingleClassInput:
        area = None
    return EvalReport(
        _harmonic(precision, recall), precision, recall, area, b.accuracy, b.precision, b.recall, b.f1,
        b.tp, b.fp, b.tn, b.fn, b.tp + b.fp + b.tn + b.fn, float(threshold),
    )


def compare_reports(reports: Sequence[tuple[str, EvalReport]]) -> str:
    """CSV text with one row per named report, in the given order."""
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for name, report in reports:
        writer.writerow(report.row(name))
    return out.getvalue()
