"""The iterative constrained-clustering / metric-learning loop and its reports."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .cluster import pcc_kmeans
from .constraints import SimilarityConfig
from .core import ClusterModel, ConstraintSet, EmbeddingSet, LinkSource, MetricModel, Split, WhiteningTransform
from .embed import TrainConfig, fit_pca_whiten, init_metric_model, train_epoch
from .formats import write_pnm
from .ingest import Dataset, crop, load_image, resize_area
from .metrics import db_index, homogeneity_report, nmi, precision_at_k
from .validation import check_features

log = logging.getLogger(__name__)

ALL_SOURCES = ("Neighbor", "LR", "RSM")
ABLATION_VARIANTS = ((), ("Neighbor",), ("LR",), ("RSM",), ("Neighbor", "LR"), ALL_SOURCES)


@dataclass(frozen=True)
class MetricConfig:
    margin: float = 0.2
    lr: float = 1e-4
    weight_decay: float = 1e-5
    per_cluster: int = 4
    epochs_per_round: int = 5
    out_dim: int | None = None
    hidden_units: int | None = None


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 150
    max_rounds: int = 20
    nmi_convergence: float = 0.95
    lam: float = 1.0
    similarity: SimilarityConfig = SimilarityConfig()
    metric: MetricConfig = MetricConfig()
    seed: int = 0
    constraint_sources: tuple[str, ...] = ALL_SOURCES
    pca_dim: int | None = None
    n_init: int = 10

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be positive")
        if not 0 < self.nmi_convergence <= 1:
            raise ValueError("nmi_convergence must lie in (0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        m = self.metric
        if m.margin <= 0 or m.lr < 0 or m.weight_decay < 0 or m.per_cluster < 1 or m.epochs_per_round < 0:
            raise ValueError("invalid metric settings")
        for s in self.constraint_sources:
            LinkSource(s)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["constraint_sources"] = list(self.constraint_sources)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(d.get("similarity"), dict):
            d["similarity"] = SimilarityConfig(**d["similarity"])
        if isinstance(d.get("metric"), dict):
            d["metric"] = MetricConfig(**d["metric"])
        if "constraint_sources" in d:
            d["constraint_sources"] = tuple(d["constraint_sources"])
        return cls(**d)

    def replace(self, **kw) -> "PipelineConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return PipelineConfig(**d)


@dataclass
class RoundRecord:
    round: int
    objective: float
    db_index: float
    nmi_prev: float | None
    triplet_loss: float | None
    iterations: int
    assignments: np.ndarray = field(repr=False)
    embedding: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        return {
            "round": self.round,
            "objective": self.objective,
            "db_index": self.db_index,
            "nmi_prev": self.nmi_prev,
            "triplet_loss": self.triplet_loss,
            "iterations": self.iterations,
        }


@dataclass
class DCCMLResult:
    cluster_model: ClusterModel
    metric_model: MetricModel
    transform: WhiteningTransform
    embedding: EmbeddingSet
    history: list[RoundRecord]
    converged: bool
    selected_round: int
    constraints: ConstraintSet

    @property
    def status(self) -> str:
        return "converged" if self.converged else "unconverged"

    @property
    def assignments(self) -> np.ndarray:
        return self.cluster_model.assignments


class PipelineError(RuntimeError):
    pass


def standardize(X: np.ndarray) -> np.ndarray:
    """Per-column z-score; constant columns are only centred."""
    X = np.asarray(X, dtype=np.float64)
    sd = X.std(axis=0)
    return (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def run_dccml(features, constraints: ConstraintSet | None = None, config: PipelineConfig = PipelineConfig(), patch_ids=None) -> DCCMLResult:
    """Alternate constrained clustering and triplet training until assignments settle.

    ``features`` is an :class:`EmbeddingSet` or a matrix with ``patch_ids``
    (defaulting to row indices). Only links whose source is listed in
    ``config.constraint_sources`` are used.
    """
    if isinstance(features, EmbeddingSet):
        X, ids = features.values.astype(np.float64), features.patch_ids
    else:
        X = check_features(features, min_samples=2)
        ids = np.arange(X.shape[0]) if patch_ids is None else np.asarray(patch_ids, dtype=np.int64)
    Xs = standardize(X)
    active = (constraints or ConstraintSet()).only(config.constraint_sources)
    rng = np.random.default_rng(config.seed)
    mc = config.metric
    try:
        model = init_metric_model(Xs, mc.out_dim, mc.margin, mc.lr, mc.weight_decay, mc.hidden_units, rng)
    except ValueError as exc:
        raise PipelineError(f"metric initialisation: {exc}") from exc
    train_cfg = TrainConfig(per_cluster=mc.per_cluster)

    history: list[RoundRecord] = []
    snapshots = []
    converged = False
    for r in range(1, config.max_rounds + 1):
        try:
            Z = model.project(Xs)
            transform, emb = fit_pca_whiten(EmbeddingSet(Z, ids), config.pca_dim)
            cm = pcc_kmeans(emb, config.k, active, config.lam, n_init=config.n_init, random_state=config.seed + r)
        except Exception as exc:
            raise PipelineError(f"round {r}: {exc}") from exc
        rec = RoundRecord(
            round=r,
            objective=cm.objective,
            db_index=db_index(emb.values, cm.assignments),
            nmi_prev=nmi(cm.assignments, history[-1].assignments) if history else None,
            triplet_loss=None,
            iterations=cm.iterations_run,
            assignments=cm.assignments.copy(),
            embedding=np.asarray(emb.values).copy(),
        )
        history.append(rec)
        snapshots.append((cm, model.copy(), transform, emb))
        log.info("round %d: J=%.4f DB=%.4f NMI=%s", r, rec.objective, rec.db_index, rec.nmi_prev)
        if rec.nmi_prev is not None and rec.nmi_prev >= config.nmi_convergence:
            converged = True
            break
        if r == config.max_rounds:
            break
        losses = []
        try:
            for _ in range(mc.epochs_per_round):
                _, stats = train_epoch(model, Xs, cm.assignments, train_cfg, rng)
                losses.append(stats["mean_loss"])
        except Exception as exc:
            raise PipelineError(f"round {r}: {exc}") from exc
        rec.triplet_loss = float(np.mean(losses)) if losses else None

    if converged or config.max_rounds == 1:
        pick = len(history) - 1
        converged = converged or config.max_rounds == 1
    else:
        pick = int(np.argmin([h.db_index for h in history]))
    cm, mm, transform, emb = snapshots[pick]
    return DCCMLResult(cm, mm, transform, emb, history, converged, pick + 1, active)


# -- evaluation helpers -----------------------------------------------------------


def evaluate(embedding: np.ndarray, assignments, truth=None, groups=None, patch_ids=None, query_mask=None, k_retrieval: int = 10) -> dict:
    """Metrics of one clustering: DB, NMI vs truth, homogeneous clusters, mean P@10.

    Retrieval runs over the rows selected by ``query_mask`` (all rows when
    omitted), which serve as both queries and gallery.
    """
    assignments = np.asarray(assignments)
    out = {
        "db_index": db_index(embedding, assignments),
        "k": int(len(np.unique(assignments))),
        "n_patches": int(len(assignments)),
        "nmi_vs_truth": None,
        "homogeneous_clusters": None,
        "precision_at_10_mean": None,
    }
    if truth is not None:
        truth = np.asarray(truth)
        out["nmi_vs_truth"] = nmi(assignments, truth)
        out["homogeneous_clusters"] = homogeneity_report(assignments, truth)[0]
        if groups is not None:
            rows = np.arange(len(assignments)) if query_mask is None else np.flatnonzero(query_mask)
            if len(rows) > 1:
                ids = None if patch_ids is None else np.asarray(patch_ids)[rows]
                res = precision_at_k(np.asarray(embedding)[rows], truth[rows], [groups[i] for i in rows], ids, k_retrieval)
                out["precision_at_10_mean"] = res.mean
    return out


def variant_name(sources: Sequence[str]) -> str:
    return "+".join(sources) if sources else "none"


def run_ablation(features, constraints, config: PipelineConfig, variants=ABLATION_VARIANTS, truth=None, groups=None, patch_ids=None, query_mask=None) -> list[dict]:
    """One :func:`run_dccml` per constraint-source subset, sharing the seed.

    A failing variant yields a row with ``error`` set; the table is still returned.
    """
    rows = []
    for sources in variants:
        row = {"variant": variant_name(sources), "sources": list(sources)}
        try:
            res = run_dccml(features, constraints, config.replace(constraint_sources=tuple(sources)), patch_ids)
            ids = res.embedding.patch_ids
            row.update(evaluate(res.embedding.values, res.assignments, truth, groups, ids, query_mask))
            row.update(status=res.status, rounds=len(res.history), error=None)
        except Exception as exc:  # recorded, not raised
            log.warning("variant %s failed: %s", row["variant"], exc)
            row.update(db_index=math.nan, homogeneous_clusters=None, precision_at_10_mean=None, error=str(exc))
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'variant':<20} {'DB':>8} {'homog':>6} {'P@10':>7}"]
    for r in rows:
        p = r.get("precision_at_10_mean")
        h = r.get("homogeneous_clusters")
        lines.append(
            f"{r['variant']:<20} {r['db_index']:>8.4f} {('-' if h is None else h):>6} "
            f"{('-' if p is None else f'{p:.4f}'):>7}"
        )
    return "\n".join(lines)


def held_out_mask(patches) -> np.ndarray:
    return np.array([p.split == Split.TEST for p in patches])


# -- montage ----------------------------------------------------------------------


def emit_cluster_montage(dataset: Dataset, patches, assignments, cluster_id: int, path, n_samples: int = 300, seed: int = 0, tile: int = 64) -> tuple[int, int]:
    """Grid of up to ``n_samples`` random member patches written as a PPM.

    Returns the grid shape ``(rows, cols)``.
    """
    assignments = np.asarray(assignments)
    members = np.flatnonzero(assignments == cluster_id)
    if len(members) == 0:
        raise ValueError(f"cluster {cluster_id} has no members")
    rng = np.random.default_rng(seed)
    m = min(n_samples, len(members))
    chosen = np.sort(rng.choice(members, size=m, replace=False))
    cols = math.ceil(math.sqrt(m))
    rows = math.ceil(m / cols)
    canvas = np.zeros((rows * tile, cols * tile, 3), dtype=np.uint8)
    images = dataset.by_id()
    for slot, idx in enumerate(chosen):
        p = patches[idx]
        px = crop(load_image(images[p.image_id]).pixels, p)
        if px.ndim == 2:
            px = px[:, :, None].repeat(3, axis=2)
        small = np.stack([resize_area(px[:, :, ch].astype(np.float64), tile, tile) for ch in range(3)], axis=2)
        r, c = divmod(slot, cols)
        canvas[r * tile : (r + 1) * tile, c * tile : (c + 1) * tile] = np.clip(np.rint(small), 0, 255).astype(np.uint8)
    write_pnm(Path(path), canvas)
    return rows, cols
