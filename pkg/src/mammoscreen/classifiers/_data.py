from __future__ import annotations

import numpy as np

from ..dataset import ExampleSet


def as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    """Accept an ExampleSet or an ``(X, y)`` pair; labels come back as {0, 1} ints."""
    if isinstance(data, ExampleSet):
        X, y = data.X, data.y
    else:
        X, y = data
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y).reshape(-1).astype(np.int64)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} rows vs {len(y)} labels")
    if len(y) and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return X, y
