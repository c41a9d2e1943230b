"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_features(X, min_samples: int = 1) -> np.ndarray:
    """2-D float64 copy-free view of ``X``; rejects NaN/inf with ``ValueError``."""
    return check_array(
        X,
        dtype=np.float64,
        ensure_2d=True,
        ensure_all_finite=True,
        ensure_min_samples=min_samples,
    )


def check_labels(labels, n: int | None = None, name: str = "labels") -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if n is not None and len(labels) != n:
        raise ValueError(f"{name} has length {len(labels)}, expected {n}")
    return labels
