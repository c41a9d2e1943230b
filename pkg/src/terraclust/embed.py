"""Feature transforms for clustering and triplet metric learning."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import EmbeddingSet, MetricModel, WhiteningTransform, l2_normalize
from .validation import check_features, check_labels

log = logging.getLogger(__name__)

WHITEN_EPS = 1e-8


class RankWarning(UserWarning):
    pass


class SamplingError(ValueError):
    pass


def default_out_dim(dim: int, n: int) -> int:
    return 256 if dim > 256 else min(dim, n - 1)


class PCAWhitener(TransformerMixin, BaseEstimator):
    """PCA projection, per-component whitening and optional row L2 normalisation.

    ``n_components=None`` picks 256 for inputs wider than 256 and
    ``min(dim, n - 1)`` otherwise.
    """

    def __init__(self, n_components=None, eps=WHITEN_EPS, l2_normalize=True):
        self.n_components = n_components
        self.eps = eps
        self.l2_normalize = l2_normalize

    def fit(self, X, y=None):
        X = check_features(X, min_samples=2)
        n, dim = X.shape
        out_dim = self.n_components or default_out_dim(dim, n)
        if out_dim > dim or out_dim >= n:
            raise ValueError(f"n_components={out_dim} needs dim >= it and more than it samples ({n}x{dim})")
        mean = X.mean(axis=0)
        Xc = X - mean
        cov = Xc.T @ Xc / (n - 1)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals = np.clip(evals[order], 0.0, None)
        evecs = evecs[:, order]
        # sign convention: largest-magnitude loading of each direction is positive
        flip = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(dim)])
        evecs = evecs * np.where(flip == 0, 1.0, flip)
        tol = max(evals[0], 0.0) * dim * np.finfo(np.float64).eps
        self.rank_ = int(np.sum(evals > tol))
        if self.rank_ < out_dim:
            warnings.warn(
                f"data has numerical rank {self.rank_} < {out_dim} components; "
                "trailing scales fall back to sqrt(eps)",
                RankWarning,
                stacklevel=2,
            )
        self.mean_ = mean
        self.components_ = evecs[:, :out_dim].T.copy()
        self.explained_variance_ = evals[:out_dim].copy()
        self.scales_ = np.sqrt(self.explained_variance_ + self.eps)
        return self

    def whiten(self, X) -> np.ndarray:
        """Projected and whitened, before normalisation."""
        check_is_fitted(self, "components_")
        X = check_features(X)
        return (X - self.mean_) @ self.components_.T / self.scales_

    def transform(self, X) -> np.ndarray:
        Z = self.whiten(X)
        return l2_normalize(Z) if self.l2_normalize else Z

    def to_transform(self) -> WhiteningTransform:
        check_is_fitted(self, "components_")
        return WhiteningTransform(self.mean_, self.components_, self.scales_, self.l2_normalize)


def fit_pca_whiten(embeddings: EmbeddingSet, out_dim: int | None = None):
    """Fit PCA-whitening on an embedding set; returns ``(transform, transformed set)``."""
    pw = PCAWhitener(n_components=out_dim).fit(embeddings.values)
    transform = pw.to_transform()
    Z = pw.transform(embeddings.values)
    return transform, EmbeddingSet(Z, embeddings.patch_ids, transform)


# -- triplets ---------------------------------------------------------------------


def cluster_index(labels, k: int | None = None):
    """``(order, starts, sizes)``: members of cluster ``c`` are ``order[starts[c]:starts[c+1]]``."""
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if k is None else k
    sizes = np.bincount(labels, minlength=k)
    order = np.argsort(labels, kind="stable")
    starts = np.concatenate([[0], np.cumsum(sizes)])
    return order, starts, sizes


def sample_triplets(
    assignments,
    per_cluster: int = 4,
    k: int | None = None,
    rng=None,
    embedded: np.ndarray | None = None,
    margin: float = 0.2,
    index=None,
) -> np.ndarray:
    """Draw ``(anchor, positive, negative)`` index triplets from pseudo-labels.

    Each cluster with at least two members contributes ``per_cluster``
    anchors (with replacement when smaller). When ``embedded`` is given, the
    negative is a random semi-hard one among the batch's points
    (``d_ap < d_an < d_ap + margin``, squared distances), else a uniform
    draw from another cluster. ``index`` may carry a precomputed
    :func:`cluster_index` of the same labels.
    """
    labels = check_labels(assignments)
    rng = np.random.default_rng(rng)
    order, starts, sizes = index if index is not None else cluster_index(labels, k)
    eligible = np.flatnonzero(sizes >= 2)
    if len(eligible) < 2:
        raise SamplingError("need at least two clusters with two or more members")

    # anchor and positive as positions inside their cluster's block of ``order``
    m = len(eligible) * per_cluster
    cl = np.repeat(eligible, per_cluster)
    size = sizes[cl]
    pos_a = rng.integers(0, size).reshape(len(eligible), per_cluster)
    # without replacement where the cluster is large enough: redraw rows with repeats
    srt = np.sort(pos_a, axis=1)
    clash = (srt[:, 1:] == srt[:, :-1]).any(axis=1) & (sizes[eligible] >= per_cluster)
    for j in np.flatnonzero(clash):
        pos_a[j] = rng.choice(sizes[eligible[j]], size=per_cluster, replace=False)
    pos_a = pos_a.ravel()
    pos_p = (pos_a + 1 + rng.integers(0, size - 1)) % size
    anchors = order[starts[cl] + pos_a]
    positives = order[starts[cl] + pos_p]

    n = len(labels)
    other = n - size
    r = rng.integers(0, other)
    lo = starts[cl]
    negatives = order[np.where(r < lo, r, r + size)]
    if embedded is not None:
        batch = np.unique(np.concatenate([anchors, positives]))
        Ea, Ep, Eb = (np.asarray(embedded[ix], dtype=np.float64) for ix in (anchors, positives, batch))
        d_ap = ((Ea - Ep) ** 2).sum(axis=1)
        d_ab = ((Ea[:, None, :] - Eb[None, :, :]) ** 2).sum(axis=2)
        ok = (labels[batch][None, :] != cl[:, None]) & (d_ab > d_ap[:, None]) & (d_ab < d_ap[:, None] + margin)
        keys = np.where(ok, rng.random(ok.shape), -1.0)
        pick = np.argmax(keys, axis=1)
        has = ok.any(axis=1)
        negatives = np.where(has, batch[pick], negatives)
    return np.stack([anchors, positives, negatives], axis=1)


# -- loss ------------------------------------------------------------------------


def triplet_loss_and_grad(model: MetricModel, triplets: np.ndarray, X: np.ndarray):
    """Mean hinge ``max(0, ||f(a)-f(p)||^2 - ||f(a)-f(n)||^2 + margin)`` and its gradients.

    Returns ``(loss, grads)`` with ``grads`` keyed like the model's
    parameters. The weight gradients include ``weight_decay * W``; the
    loss value does not include the matching ``weight_decay/2 * ||W||^2``.
    """
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if not len(triplets):
        raise ValueError("empty triplet batch")
    X = np.asarray(X, dtype=np.float64)
    idx = np.unique(triplets)
    local = np.searchsorted(idx, triplets)
    Xb = X[idx]
    if not np.all(np.isfinite(Xb)):
        raise FloatingPointError("non-finite features in triplet batch")

    hidden = model.hidden_weights is not None
    if hidden:
        H = np.tanh(Xb @ model.hidden_weights.T + model.hidden_bias)
    else:
        H = Xb
    F = H @ model.weights.T + model.bias
    a, p, n = local[:, 0], local[:, 1], local[:, 2]
    dap = F[a] - F[p]
    dan = F[a] - F[n]
    raw = (dap**2).sum(axis=1) - (dan**2).sum(axis=1) + model.margin
    active = raw > 0
    losses = np.where(active, raw, 0.0)
    m = len(triplets)

    # dL/dF per batch row, averaged over triplets
    gF = np.zeros_like(F)
    ga = 2.0 * (dap - dan) * active[:, None] / m
    gp = -2.0 * dap * active[:, None] / m
    gn = 2.0 * dan * active[:, None] / m
    np.add.at(gF, a, ga)
    np.add.at(gF, p, gp)
    np.add.at(gF, n, gn)

    grads = {
        "weights": gF.T @ H + model.weight_decay * model.weights,
        "bias": gF.sum(axis=0),
    }
    if hidden:
        gH = gF @ model.weights
        gZ = gH * (1.0 - H**2)
        grads["hidden_weights"] = gZ.T @ Xb + model.weight_decay * model.hidden_weights
        grads["hidden_bias"] = gZ.sum(axis=0)
    return float(losses.mean()), grads


def apply_sgd(model: MetricModel, grads: dict) -> None:
    lr = model.learning_rate
    model.weights -= lr * grads["weights"]
    model.bias -= lr * grads["bias"]
    if model.hidden_weights is not None:
        model.hidden_weights -= lr * grads["hidden_weights"]
        model.hidden_bias -= lr * grads["hidden_bias"]


@dataclass(frozen=True)
class TrainConfig:
    per_cluster: int = 4
    batches_per_epoch: int | None = None  # None: one pass, n // batch_size batches
    semi_hard: bool = True


def train_epoch(model: MetricModel, X, assignments, config: TrainConfig = TrainConfig(), rng=None):
    """One epoch of minibatch SGD on freshly sampled triplet batches.

    Returns ``(model, stats)``; the model is updated in place.
    """
    X = check_features(X)
    labels = check_labels(assignments, X.shape[0], "assignments")
    rng = np.random.default_rng(rng)
    k = int(labels.max()) + 1
    eligible = int(np.sum(np.bincount(labels, minlength=k) >= 2))
    batch_size = config.per_cluster * max(eligible, 1)
    n_batches = config.batches_per_epoch or max(1, X.shape[0] // batch_size)
    index = cluster_index(labels, k)
    losses = []
    for _ in range(n_batches):
        if config.semi_hard:
            trip = sample_triplets(
                labels, config.per_cluster, k, rng, embedded=_LazyProjection(model, X), margin=model.margin, index=index
            )
        else:
            trip = sample_triplets(labels, config.per_cluster, k, rng, index=index)
        loss, grads = triplet_loss_and_grad(model, trip, X)
        losses.append(loss)
        apply_sgd(model, grads)
    if not model.is_finite():
        raise FloatingPointError("metric model diverged (non-finite parameters)")
    return model, {"mean_loss": float(np.mean(losses)), "batches": n_batches}


class _LazyProjection:
    """Index-able projection that only evaluates rows that are asked for."""

    def __init__(self, model, X):
        self.model, self.X = model, X

    def __getitem__(self, idx):
        return self.model.project(self.X[idx])


def init_metric_model(X, out_dim=None, margin=0.2, learning_rate=1e-4, weight_decay=1e-5, hidden_units=None, rng=None) -> MetricModel:
    """Start from the top principal directions (orthonormal rows) of ``X``.

    With ``hidden_units`` a tanh layer of that width is inserted, initialised
    with small seeded Gaussian weights.
    """
    X = check_features(X, min_samples=2)
    in_dim = X.shape[1]
    rng = np.random.default_rng(rng)
    H = X
    hw = hb = None
    if hidden_units:
        hw = rng.normal(scale=1.0 / np.sqrt(in_dim), size=(hidden_units, in_dim))
        hb = np.zeros(hidden_units)
        H = np.tanh(X @ hw.T + hb)
    width = H.shape[1]
    out_dim = out_dim or width
    if not 2 <= out_dim <= width:
        raise ValueError(f"out_dim must lie in [2, {width}]")
    mean = H.mean(axis=0)
    _, _, vt = np.linalg.svd(H - mean, full_matrices=False)
    if vt.shape[0] < out_dim:
        raise ValueError(f"{X.shape[0]} samples cannot span {out_dim} output directions")
    W = vt[:out_dim].copy()
    flip = np.sign(W[np.arange(out_dim), np.argmax(np.abs(W), axis=1)])
    W *= flip[:, None]
    b = -W @ mean
    return MetricModel(W, b, margin, learning_rate, weight_decay, hw, hb)


class TripletMetricLearner(TransformerMixin, BaseEstimator):
    """Learns an affine (optionally one-hidden-layer) map from pseudo-labels.

    ``fit`` initialises and trains; ``partial_fit`` keeps training the
    current model for another ``epochs`` epochs with new labels.
    """

    def __init__(
        self,
        out_dim=None,
        margin=0.2,
        learning_rate=1e-4,
        weight_decay=1e-5,
        per_cluster=4,
        epochs=5,
        hidden_units=None,
        random_state=None,
    ):
        self.out_dim = out_dim
        self.margin = margin
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.per_cluster = per_cluster
        self.epochs = epochs
        self.hidden_units = hidden_units
        self.random_state = random_state

    def fit(self, X, y):
        X = check_features(X, min_samples=2)
        self._rng = np.random.default_rng(self.random_state)
        self.model_ = init_metric_model(
            X, self.out_dim, self.margin, self.learning_rate, self.weight_decay, self.hidden_units, self._rng
        )
        self.loss_history_ = []
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        if not hasattr(self, "model_"):
            return self.fit(X, y)
        X = check_features(X)
        cfg = TrainConfig(per_cluster=self.per_cluster)
        for _ in range(self.epochs):
            _, stats = train_epoch(self.model_, X, y, cfg, self._rng)
            self.loss_history_.append(stats["mean_loss"])
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.project(check_features(X))
