"""Pairwise-confidence-constrained k-means.

Hard must-links are enforced by clustering whole chunklets (connected
components of the hard-link graph). Soft must-links and optional
cannot-links enter the objective as confidence-weighted penalties::

    J = sum_i ||x_i - c_{a_i}||^2 + lam * (sum of violated link confidences)

which is minimised by alternating a sequential ICM sweep over chunklets
(centroids fixed) with a centroid update (assignments fixed). Both steps
never increase ``J``.
"""

from __future__ import annotations

from typing import Sequence

import numba
import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .core import ClusterModel, ConstraintSet, EmbeddingSet
from .validation import check_features


class InfeasibleError(ValueError):
    pass


class UnionFind:
    """Disjoint sets over ``0..n-1`` with path halving and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True


def build_chunklets(n: int, hard_links) -> tuple[np.ndarray, list[np.ndarray]]:
    """Transitive closure of hard links.

    Returns ``(chunk_of, members)``: ``chunk_of[i]`` is point i's chunklet
    index and ``members[u]`` the sorted member list. Chunklets are numbered
    by their smallest member.
    """
    uf = UnionFind(n)
    for a, b in np.asarray(hard_links, dtype=np.int64).reshape(-1, 2):
        if not (0 <= a < n and 0 <= b < n):
            raise IndexError(f"hard link ({a}, {b}) out of range for {n} points")
        uf.union(int(a), int(b))
    roots = np.fromiter((uf.find(i) for i in range(n)), dtype=np.int64, count=n)
    _, first, chunk_of = np.unique(roots, return_index=True, return_inverse=True)
    # renumber by smallest member so the numbering does not depend on root choice
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    chunk_of = rank[chunk_of.ravel()]
    sort_idx = np.argsort(chunk_of, kind="stable")
    bounds = np.searchsorted(chunk_of[sort_idx], np.arange(len(order) + 1))
    members = [sort_idx[bounds[u] : bounds[u + 1]] for u in range(len(order))]
    return chunk_of, members


def _pair_csr(m: int, pairs: np.ndarray, weights: np.ndarray):
    """Symmetric adjacency (CSR) between chunklets, merging parallel edges."""
    if len(pairs) == 0:
        return np.zeros(m + 1, np.int64), np.zeros(0, np.int64), np.zeros(0)
    a = np.concatenate([pairs[:, 0], pairs[:, 1]])
    b = np.concatenate([pairs[:, 1], pairs[:, 0]])
    w = np.concatenate([weights, weights])
    key = a * m + b
    uniq, inv = np.unique(key, return_inverse=True)
    wsum = np.bincount(inv.ravel(), weights=w)
    src, dst = uniq // m, uniq % m
    ptr = np.searchsorted(src, np.arange(m + 1)).astype(np.int64)
    return ptr, dst.astype(np.int64), wsum.astype(np.float64)


@numba.njit(cache=True)
def _icm_sweep(order, cost, assign, ml_ptr, ml_idx, ml_w, cl_ptr, cl_idx, cl_w, lam):
    k = cost.shape[1]
    changed = 0
    local = np.empty(k)
    for t in range(order.shape[0]):
        u = order[t]
        for c in range(k):
            local[c] = cost[u, c]
        if lam != 0.0:
            for e in range(ml_ptr[u], ml_ptr[u + 1]):
                w = lam * ml_w[e]
                av = assign[ml_idx[e]]
                for c in range(k):
                    if c != av:
                        local[c] += w
            for e in range(cl_ptr[u], cl_ptr[u + 1]):
                local[assign[cl_idx[e]]] += lam * cl_w[e]
        cur = assign[u]
        best = cur
        best_val = local[cur]
        for c in range(k):
            if local[c] < best_val:
                best_val = local[c]
                best = c
        if best != cur:
            assign[u] = best
            changed += 1
    return changed


class _Problem:
    """Chunklet-level sufficient statistics and penalty graphs."""

    def __init__(self, X, hard, soft, soft_w, cannot, cannot_w):
        self.X = X
        n = X.shape[0]
        self.chunk_of, self.members = build_chunklets(n, hard)
        m = len(self.members)
        self.m = m
        self.mass = np.bincount(self.chunk_of, minlength=m).astype(np.float64)
        self.sums = np.zeros((m, X.shape[1]))
        np.add.at(self.sums, self.chunk_of, X)
        self.sqs = np.bincount(self.chunk_of, weights=(X * X).sum(axis=1), minlength=m)
        self.means = self.sums / self.mass[:, None]

        def lift(pairs, w):
            pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
            w = np.asarray(w, dtype=np.float64).reshape(-1)
            if len(pairs) and (pairs.min() < 0 or pairs.max() >= n):
                raise IndexError("constraint index out of range")
            cu = self.chunk_of[pairs[:, 0]] if len(pairs) else np.zeros(0, np.int64)
            cv = self.chunk_of[pairs[:, 1]] if len(pairs) else np.zeros(0, np.int64)
            return cu, cv, w

        su, sv, sw = lift(soft, soft_w)
        inter = su != sv
        self.ml = _pair_csr(m, np.stack([su[inter], sv[inter]], axis=1), sw[inter])
        cu, cv, cw = lift(cannot, cannot_w)
        inter = cu != cv
        self.cl = _pair_csr(m, np.stack([cu[inter], cv[inter]], axis=1), cw[inter])
        self.soft_pairs = (su, sv, sw)
        self.cannot_pairs = (cu, cv, cw)

    def cost(self, centroids):
        """``cost[u, c] = sum_{i in u} ||x_i - c||^2`` via sufficient statistics."""
        cc = (centroids * centroids).sum(axis=1)
        return self.sqs[:, None] - 2.0 * self.sums @ centroids.T + self.mass[:, None] * cc[None, :]

    def centroids(self, assign, k, previous):
        cen = previous.copy()
        counts = np.bincount(assign, weights=self.mass, minlength=k)
        sums = np.zeros_like(cen)
        np.add.at(sums, assign, self.sums)
        nz = counts > 0
        cen[nz] = sums[nz] / counts[nz, None]
        return cen, counts

    def objective(self, assign, centroids, lam):
        point_assign = assign[self.chunk_of]
        diff = self.X - centroids[point_assign]
        dist = float(np.einsum("ij,ij->", diff, diff))
        su, sv, sw = self.soft_pairs
        cu, cv, cw = self.cannot_pairs
        pen = float(sw[assign[su] != assign[sv]].sum()) + float(cw[assign[cu] == assign[cv]].sum())
        return dist + lam * pen


def kmeans_plusplus_chunklets(means, mass, k, rng) -> np.ndarray:
    """D^2 seeding over chunklet means, each chunklet weighted by its size."""
    m = len(mass)
    chosen = [int(rng.choice(m, p=mass / mass.sum()))]
    d2 = ((means - means[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        w = mass * d2
        w[chosen] = 0.0
        total = w.sum()
        if total <= 0:
            w = mass.copy()
            w[chosen] = 0.0
            total = w.sum()
        nxt = int(rng.choice(m, p=w / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((means - means[nxt]) ** 2).sum(axis=1))
    return means[chosen].copy()


def _reseed_empty(prob: _Problem, assign, centroids, counts, lam):
    """Move into each empty cluster the chunklet whose departure lowers J most."""
    k = centroids.shape[0]
    moved = False
    for c in np.flatnonzero(counts == 0):
        sizes = np.bincount(assign, minlength=k)
        movable = sizes[assign] >= 2
        if not movable.any():
            break
        gain = prob.mass * ((prob.means - centroids[assign]) ** 2).sum(axis=1)
        penalty = np.zeros(prob.m)
        ptr, idx, w = prob.ml
        src = np.repeat(np.arange(prob.m), np.diff(ptr))
        same = assign[idx] == assign[src]
        np.add.at(penalty, src[same], w[same])
        ptr, idx, w = prob.cl
        src = np.repeat(np.arange(prob.m), np.diff(ptr))
        same = assign[idx] == assign[src]
        np.add.at(penalty, src[same], -w[same])
        delta = -gain + lam * penalty
        delta[~movable] = np.inf
        u = int(np.argmin(delta))
        assign[u] = c
        centroids, counts = prob.centroids(assign, k, centroids)
        centroids[c] = prob.means[u]
        moved = True
    return moved, centroids, counts


def _run_once(prob: _Problem, k, lam, max_iter, rng, init=None):
    centroids = (
        kmeans_plusplus_chunklets(prob.means, prob.mass, k, rng) if init is None else np.array(init, float)
    )
    init_centroids = centroids.copy()
    # unpenalised nearest-centroid start; sequential sweeps add the penalties
    assign = np.argmin(prob.cost(centroids), axis=1).astype(np.int64)
    centroids, counts = prob.centroids(assign, k, centroids)
    _, centroids, counts = _reseed_empty(prob, assign, centroids, counts, lam)
    history = [prob.objective(assign, centroids, lam)]
    ml_ptr, ml_idx, ml_w = prob.ml
    cl_ptr, cl_idx, cl_w = prob.cl
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        order = rng.permutation(prob.m).astype(np.int64)
        changed = _icm_sweep(
            order, prob.cost(centroids), assign, ml_ptr, ml_idx, ml_w, cl_ptr, cl_idx, cl_w, float(lam)
        )
        centroids, counts = prob.centroids(assign, k, centroids)
        moved, centroids, counts = _reseed_empty(prob, assign, centroids, counts, lam)
        history.append(prob.objective(assign, centroids, lam))
        if changed == 0 and not moved:
            break
    return assign, centroids, history, n_iter, init_centroids


def pcc_kmeans_arrays(
    X,
    k: int,
    hard=(),
    soft=(),
    soft_weights=(),
    cannot=(),
    cannot_weights=(),
    lam: float = 1.0,
    max_iter: int = 100,
    n_init: int = 10,
    random_state=None,
    init=None,
):
    """Index-based core. Returns ``(ClusterModel, init_centroids)``."""
    X = check_features(X)
    if k < 2:
        raise ValueError("k must be at least 2")
    prob = _Problem(X, hard, soft, soft_weights, cannot, cannot_weights)
    if prob.m < k:
        raise InfeasibleError(f"{prob.m} chunklets cannot fill {k} clusters")
    rng = np.random.default_rng(random_state)
    best = None
    for _ in range(max(1, n_init)):
        run = _run_once(prob, k, lam, max_iter, rng, init)
        J = run[2][-1]
        if best is None or J < best[0]:
            best = (J, run)
    J, (assign, centroids, history, n_iter, init_centroids) = best
    model = ClusterModel(
        k=k,
        centroids=centroids,
        assignments=assign[prob.chunk_of],
        chunklets=prob.members,
        objective=J,
        iterations_run=n_iter,
        objective_history=list(history),
    )
    return model, init_centroids


def pcc_kmeans(
    embeddings,
    k: int,
    constraints: ConstraintSet | None = None,
    lam: float = 1.0,
    max_iter: int = 100,
    n_init: int = 10,
    random_state=None,
) -> ClusterModel:
    """Constrained k-means on an :class:`EmbeddingSet` (or a plain matrix).

    With a plain matrix, constraint endpoints are read as row indices.
    """
    if isinstance(embeddings, EmbeddingSet):
        X, ids = embeddings.values.astype(np.float64), embeddings.patch_ids
    else:
        X = np.asarray(embeddings, dtype=np.float64)
        ids = np.arange(X.shape[0])
    constraints = constraints or ConstraintSet()
    hard, soft, sw, cannot, cw = constraints.to_index_arrays(ids)
    model, _ = pcc_kmeans_arrays(X, k, hard, soft, sw, cannot, cw, lam, max_iter, n_init, random_state)
    return model


def assign_holdout(X, centroids, chunk: int = 4096) -> np.ndarray:
    """Nearest-centroid labels; equidistant points go to the lowest index."""
    X = np.asarray(X, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if X.shape[1] != centroids.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {centroids.shape[1]}")
    out = np.empty(X.shape[0], dtype=np.int64)
    for s in range(0, X.shape[0], chunk):
        d = ((X[s : s + chunk, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        out[s : s + chunk] = np.argmin(d, axis=1)
    return out


def partition_objective(X, labels, lam=0.0, soft=(), soft_weights=(), cannot=(), cannot_weights=()) -> float:
    """Penalised objective of a labelling with centroids at the cluster means."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        pts = X[labels == c]
        total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    soft = np.asarray(soft, dtype=np.int64).reshape(-1, 2)
    cannot = np.asarray(cannot, dtype=np.int64).reshape(-1, 2)
    sw = np.asarray(soft_weights, dtype=np.float64)
    cw = np.asarray(cannot_weights, dtype=np.float64)
    if len(soft):
        total += lam * float(sw[labels[soft[:, 0]] != labels[soft[:, 1]]].sum())
    if len(cannot):
        total += lam * float(cw[labels[cannot[:, 0]] == labels[cannot[:, 1]]].sum())
    return total


class PCCKMeans(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`pcc_kmeans_arrays`.

    Constraints are passed to :meth:`fit` as row-index pairs.
    """

    def __init__(self, n_clusters=150, lam=1.0, max_iter=100, n_init=10, random_state=None):
        self.n_clusters = n_clusters
        self.lam = lam
        self.max_iter = max_iter
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None, hard_links=(), soft_links=(), soft_weights=None, cannot_links=(), cannot_weights=None):
        soft_links = np.asarray(soft_links, dtype=np.int64).reshape(-1, 2)
        cannot_links = np.asarray(cannot_links, dtype=np.int64).reshape(-1, 2)
        if soft_weights is None:
            soft_weights = np.ones(len(soft_links))
        if cannot_weights is None:
            cannot_weights = np.ones(len(cannot_links))
        model, init = pcc_kmeans_arrays(
            X,
            self.n_clusters,
            hard_links,
            soft_links,
            soft_weights,
            cannot_links,
            cannot_weights,
            self.lam,
            self.max_iter,
            self.n_init,
            self.random_state,
        )
        self.model_ = model
        self.labels_ = model.assignments
        self.cluster_centers_ = model.centroids
        self.objective_ = model.objective
        self.objective_history_ = model.objective_history
        self.n_iter_ = model.iterations_run
        self.chunklets_ = model.chunklets
        self.init_centroids_ = init
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return assign_holdout(check_features(X), self.cluster_centers_)


def satisfied_fraction(assignments: np.ndarray, pairs: Sequence[tuple[int, int]]) -> float:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if not len(pairs):
        return 1.0
    return float(np.mean(assignments[pairs[:, 0]] == assignments[pairs[:, 1]]))
