"""Clustering and retrieval metrics, plus the column-based train/test split."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import PatchRecord, Split
from .validation import check_features, check_labels


def db_index(X, labels) -> float:
    """Davies-Bouldin index with mean (not RMS) member-to-centroid distance.

    Coincident centroids make the affected ratio, and the index, infinite.
    """
    X = check_features(X)
    labels = check_labels(labels, X.shape[0])
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise ValueError("Davies-Bouldin needs at least two non-empty clusters")
    centroids = np.stack([X[labels == c].mean(axis=0) for c in clusters])
    sigma = np.array(
        [np.linalg.norm(X[labels == c] - centroids[i], axis=1).mean() for i, c in enumerate(clusters)]
    )
    diff = centroids[:, None, :] - centroids[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    num = sigma[:, None] + sigma[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dist > 0, num / np.where(dist > 0, dist, 1.0), np.inf)
    np.fill_diagonal(ratio, -np.inf)
    return float(ratio.max(axis=1).mean())


def nmi(labels_a, labels_b) -> float:
    """``2 I(A;B) / (H(A) + H(B))`` with natural logs; 1.0 when both are single-cluster."""
    a = check_labels(labels_a, name="labels_a")
    b = check_labels(labels_b, name="labels_b")
    if len(a) != len(b):
        raise ValueError(f"label vectors differ in length ({len(a)} vs {len(b)})")
    if len(a) == 0:
        raise ValueError("empty label vectors")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    ia, ib = ia.ravel(), ib.ravel()
    n = len(a)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    h_a = -float(np.sum(pa * np.log(pa)))
    h_b = -float(np.sum(pb * np.log(pb)))
    if h_a + h_b == 0:
        return 1.0
    nz = table > 0
    if nz.sum(axis=0).max() == 1 and nz.sum(axis=1).max() == 1:
        return 1.0  # same partition up to relabelling; skip rounding in the ratio
    pab = table[nz] / n
    outer = (pa[:, None] * pb[None, :])[nz]
    mi = float(np.sum(pab * np.log(pab / outer)))
    return float(np.clip(2.0 * mi / (h_a + h_b), 0.0, 1.0))


@dataclass
class RetrievalResult:
    precision: np.ndarray  # per query
    retrieved: list[np.ndarray]  # gallery row indices, nearest first
    short: np.ndarray  # True where fewer than k eligible items existed

    @property
    def mean(self) -> float:
        return float(self.precision.mean()) if len(self.precision) else float("nan")


def precision_at_k(
    X,
    labels,
    groups,
    patch_ids=None,
    k: int = 10,
    queries: Sequence[int] | None = None,
) -> RetrievalResult:
    """Precision@k over a gallery, skipping items that share the query's group.

    ``groups`` holds one hashable per row (the (site, drive) pair). Rows
    serve both as queries and as gallery. Neighbours are ranked by Euclidean
    distance, ties by ascending patch id.
    """
    X = check_features(X)
    n = X.shape[0]
    labels = check_labels(labels, n)
    group_codes = _encode(groups, n)
    patch_ids = np.arange(n) if patch_ids is None else np.asarray(patch_ids)
    queries = np.arange(n) if queries is None else np.asarray(queries, dtype=np.int64)
    prec = np.zeros(len(queries))
    short = np.zeros(len(queries), dtype=bool)
    retrieved = []
    for t, q in enumerate(queries):
        eligible = np.flatnonzero(group_codes != group_codes[q])
        d = ((X[eligible] - X[q]) ** 2).sum(axis=1)
        order = np.lexsort((patch_ids[eligible], d))[:k]
        top = eligible[order]
        retrieved.append(top)
        if len(top) < k:
            short[t] = True
        prec[t] = float(np.mean(labels[top] == labels[q])) if len(top) else 0.0
    return RetrievalResult(prec, retrieved, short)


def _encode(groups, n) -> np.ndarray:
    groups = list(groups)
    if len(groups) != n:
        raise ValueError("groups must have one entry per row")
    codes: dict = {}
    return np.array([codes.setdefault(tuple(g) if isinstance(g, (list, tuple)) else g, len(codes)) for g in groups])


def split_train_test(patches: Sequence[PatchRecord], image_widths: dict[int, int], fraction: float = 0.6) -> list[PatchRecord]:
    """Train left of ``fraction * width``, Test right of it, straddlers Excluded."""
    out = []
    for p in patches:
        boundary = fraction * image_widths[p.image_id]
        c0, c1 = p.col0, p.col0 + p.patch_size
        if c1 <= boundary:
            split = Split.TRAIN
        elif c0 >= boundary:
            split = Split.TEST
        else:
            split = Split.EXCLUDED
        out.append(p.evolve(split=split))
    return out


def homogeneity_report(assignments, truth, threshold: float = 0.8):
    """Clusters whose majority label covers strictly more than ``threshold`` of members.

    Returns ``(count, {cluster: majority fraction})``.
    """
    assignments = check_labels(assignments, name="assignments")
    truth = check_labels(truth, len(assignments), "truth")
    fractions = {}
    for c in np.unique(assignments):
        members = truth[assignments == c]
        _, counts = np.unique(members, return_counts=True)
        fractions[int(c)] = float(counts.max() / len(members))
    count = sum(1 for f in fractions.values() if f > threshold)
    return count, fractions
