"""Task metrics and over-smoothing diagnostics."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import pdist


def _subset(a, subset):
    a = np.asarray(a)
    return a if subset is None else a[np.asarray(subset, dtype=np.int64)]


def accuracy(pred_classes, true_classes, subset=None) -> float:
    pred, true = _subset(pred_classes, subset), _subset(true_classes, subset)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("accuracy over an empty subset")
    return float(np.mean(pred == true))


def rmse(pred, target, subset=None) -> float:
    pred = _subset(pred, subset).astype(np.float64)
    target = _subset(target, subset).astype(np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("rmse over an empty subset")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def row_diff(H) -> float:
    """Mean Euclidean distance over all unordered pairs of rows."""
    H = np.asarray(getattr(H, "values", H), dtype=np.float64)
    if H.shape[0] < 2:
        raise ValueError("row_diff needs at least two rows")
    return float(pdist(H).mean())


def col_diff(H) -> float:
    """Mean Euclidean distance between L1-normalized columns."""
    H = np.asarray(getattr(H, "values", H), dtype=np.float64)
    if H.shape[1] < 2:
        raise ValueError("col_diff needs at least two columns")
    norms = np.abs(H).sum(axis=0)
    cols = np.divide(H, norms, out=np.zeros_like(H), where=norms > 0)
    return float(pdist(cols.T).mean())
