"""Shared data types for patches, embeddings, constraints and models."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np


class Eye(str, enum.Enum):
    LEFT = "Left"
    RIGHT = "Right"
    MONO = "Mono"


class FilterClass(str, enum.Enum):
    ROCK = "Rock"
    SOIL = "Soil"
    PEBBLY = "Pebbly"
    MIXED = "Mixed"
    DISTANT = "Distant"
    UNFILTERED = "Unfiltered"


class Split(str, enum.Enum):
    TRAIN = "Train"
    TEST = "Test"
    EXCLUDED = "Excluded"


class LinkSource(str, enum.Enum):
    LR = "LR"
    RSM = "RSM"
    NEIGHBOR = "Neighbor"


@dataclass(frozen=True, eq=False)
class PatchRecord:
    """One square image patch and its provenance.

    ``center_row``/``center_col`` are pixel coordinates in the source image;
    the window's top-left corner is ``center - patch_size // 2``.
    """

    patch_id: int
    image_id: int
    center_row: int
    center_col: int
    patch_size: int
    depth_pixels: np.ndarray | None = None
    depth_mean: float = 0.0
    site: int = 0
    drive: int = 0
    pose: int = 0
    rsm_count: int = 0
    eye: Eye = Eye.MONO
    filter_class: FilterClass = FilterClass.UNFILTERED
    split: Split = Split.TRAIN

    @property
    def row0(self) -> int:
        return self.center_row - self.patch_size // 2

    @property
    def col0(self) -> int:
        return self.center_col - self.patch_size // 2

    @property
    def key(self) -> tuple[int, int, int, int]:
        return (self.image_id, self.center_row, self.center_col, self.patch_size)

    def evolve(self, **changes) -> "PatchRecord":
        return replace(self, **changes)


@dataclass(frozen=True)
class WhiteningTransform:
    pca_mean: np.ndarray
    pca_basis: np.ndarray  # (out_dim, dim), rows are principal directions
    whitening_scales: np.ndarray
    l2_normalized: bool = True

    def apply(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.pca_mean) @ self.pca_basis.T
        Z /= self.whitening_scales
        if self.l2_normalized:
            Z = l2_normalize(Z)
        return Z


def l2_normalize(Z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return Z / norms


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    values: np.ndarray
    patch_ids: np.ndarray
    transform: WhiteningTransform | None = None

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError("embedding values must be a 2-D matrix")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "patch_ids", np.asarray(self.patch_ids, dtype=np.int64))

    @property
    def n_patches(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _canon(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class HardLink:
    a: int
    b: int
    source: LinkSource


@dataclass(frozen=True)
class SoftLink:
    a: int
    b: int
    confidence: float
    source: LinkSource = LinkSource.NEIGHBOR


@dataclass(frozen=True)
class ConstraintSet:
    hard_links: tuple[HardLink, ...] = ()
    soft_links: tuple[SoftLink, ...] = ()
    cannot_links: tuple[SoftLink, ...] = ()

    @classmethod
    def build(
        cls,
        hard: Iterable[HardLink] = (),
        soft: Iterable[SoftLink] = (),
        cannot: Iterable[SoftLink] = (),
    ) -> "ConstraintSet":
        return cls(tuple(hard), tuple(soft), tuple(cannot)).dedup()

    def dedup(self) -> "ConstraintSet":
        """Canonicalise pairs to ``a < b`` and drop duplicates.

        A pair that is hard-linked is removed from the soft list; among
        repeated soft pairs the highest confidence wins. Self-pairs vanish.
        """
        hard: dict[tuple[int, int], HardLink] = {}
        for link in self.hard_links:
            if link.a == link.b:
                continue
            a, b = _canon(link.a, link.b)
            hard.setdefault((a, b), HardLink(a, b, LinkSource(link.source)))
        soft: dict[tuple[int, int], SoftLink] = {}
        for link in self.soft_links:
            if link.a == link.b:
                continue
            a, b = _canon(link.a, link.b)
            if (a, b) in hard:
                continue
            prev = soft.get((a, b))
            if prev is None or link.confidence > prev.confidence:
                soft[(a, b)] = SoftLink(a, b, float(link.confidence), LinkSource(link.source))
        cannot: dict[tuple[int, int], SoftLink] = {}
        for link in self.cannot_links:
            if link.a == link.b:
                continue
            a, b = _canon(link.a, link.b)
            prev = cannot.get((a, b))
            if prev is None or link.confidence > prev.confidence:
                cannot[(a, b)] = SoftLink(a, b, float(link.confidence), LinkSource(link.source))
        return ConstraintSet(
            tuple(hard[k] for k in sorted(hard)),
            tuple(soft[k] for k in sorted(soft)),
            tuple(cannot[k] for k in sorted(cannot)),
        )

    def merge(self, other: "ConstraintSet") -> "ConstraintSet":
        return ConstraintSet(
            self.hard_links + other.hard_links,
            self.soft_links + other.soft_links,
            self.cannot_links + other.cannot_links,
        ).dedup()

    def only(self, sources: Iterable[LinkSource | str]) -> "ConstraintSet":
        keep = {LinkSource(s) for s in sources}
        return ConstraintSet(
            tuple(h for h in self.hard_links if h.source in keep),
            tuple(s for s in self.soft_links if s.source in keep),
            self.cannot_links,
        )

    def count_by_source(self) -> dict[str, int]:
        counts = {s.value: 0 for s in LinkSource}
        for link in self.hard_links + self.soft_links:
            counts[link.source.value] += 1
        return counts

    def to_index_arrays(self, patch_ids: Sequence[int]):
        """Translate patch-id links into row indices of an embedding matrix.

        Returns ``(hard (m,2) int, soft (s,2) int, soft weights, cannot (c,2), cannot weights)``.
        Links to ids absent from ``patch_ids`` are dropped.
        """
        index = {int(p): i for i, p in enumerate(patch_ids)}

        def pairs(links):
            rows, weights = [], []
            for link in links:
                ia, ib = index.get(link.a), index.get(link.b)
                if ia is None or ib is None:
                    continue
                rows.append((ia, ib))
                weights.append(getattr(link, "confidence", 1.0))
            return (
                np.asarray(rows, dtype=np.int64).reshape(-1, 2),
                np.asarray(weights, dtype=np.float64),
            )

        hard, _ = pairs(self.hard_links)
        soft, soft_w = pairs(self.soft_links)
        cannot, cannot_w = pairs(self.cannot_links)
        return hard, soft, soft_w, cannot, cannot_w


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    chunklets: list[np.ndarray]
    objective: float
    iterations_run: int
    objective_history: list[float] = field(default_factory=list)


@dataclass
class MetricModel:
    """Affine projection ``f(x) = W x + b``, optionally with one tanh hidden layer."""

    weights: np.ndarray
    bias: np.ndarray
    margin: float = 0.2
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    hidden_weights: np.ndarray | None = None
    hidden_bias: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        if self.hidden_weights is not None:
            return self.hidden_weights.shape[1]
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def project(self, X: np.ndarray) -> np.ndarray:
        H = np.asarray(X, dtype=np.float64)
        if self.hidden_weights is not None:
            H = np.tanh(H @ self.hidden_weights.T + self.hidden_bias)
        return H @ self.weights.T + self.bias

    def copy(self) -> "MetricModel":
        return MetricModel(
            self.weights.copy(),
            self.bias.copy(),
            self.margin,
            self.learning_rate,
            self.weight_decay,
            None if self.hidden_weights is None else self.hidden_weights.copy(),
            None if self.hidden_bias is None else self.hidden_bias.copy(),
        )

    def is_finite(self) -> bool:
        arrays = [self.weights, self.bias]
        if self.hidden_weights is not None:
            arrays += [self.hidden_weights, self.hidden_bias]
        return all(np.all(np.isfinite(a)) for a in arrays)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str) -> None:
        self.violations.append(message)


def validate_dataset(
    patches: Sequence[PatchRecord],
    embeddings: EmbeddingSet | None = None,
    image_sizes: dict[int, tuple[int, int]] | None = None,
    constraints: ConstraintSet | None = None,
    soft_threshold: float = 0.7,
) -> ValidationReport:
    """Collect every invariant violation; never raises.

    ``image_sizes`` maps image_id to ``(height, width)`` and enables the
    full bounds check; without it only negative or sub-half-window centers
    are flagged.
    """
    report = ValidationReport()
    seen_ids: set[int] = set()
    seen_keys: set[tuple[int, int, int, int]] = set()
    for p in patches:
        if p.patch_id in seen_ids:
            report.add(f"duplicate patch_id {p.patch_id}")
        seen_ids.add(p.patch_id)
        if p.key in seen_keys:
            report.add(f"duplicate window {p.key} (patch {p.patch_id})")
        seen_keys.add(p.key)
        if p.patch_size <= 0:
            report.add(f"patch {p.patch_id}: non-positive patch_size {p.patch_size}")
            continue
        half = p.patch_size // 2
        lo_ok = p.center_row >= half and p.center_col >= half
        hi_ok = True
        if image_sizes is not None and p.image_id in image_sizes:
            h, w = image_sizes[p.image_id]
            hi_ok = p.center_row <= h - (p.patch_size - half) and p.center_col <= w - (
                p.patch_size - half
            )
        if not (lo_ok and hi_ok):
            report.add(f"patch {p.patch_id}: center out of bounds ({p.center_row}, {p.center_col})")
        if p.depth_pixels is not None and np.size(p.depth_pixels) != p.patch_size**2:
            report.add(
                f"patch {p.patch_id}: depth_pixels has {np.size(p.depth_pixels)} entries, "
                f"expected {p.patch_size ** 2}"
            )

    if embeddings is not None:
        if embeddings.n_patches != len(patches):
            report.add(
                f"row-count mismatch: {embeddings.n_patches} embedding rows vs {len(patches)} patches"
            )
        ids = embeddings.patch_ids
        if len(ids) != embeddings.n_patches:
            report.add("patch_ids length differs from embedding row count")
        if len(np.unique(ids)) != len(ids):
            report.add("duplicate patch_ids in embeddings")
        missing = set(int(i) for i in ids) - seen_ids
        if missing:
            report.add(f"{len(missing)} embedding rows reference unknown patches")
        if embeddings.transform is not None and embeddings.transform.l2_normalized:
            norms = np.linalg.norm(embeddings.values.astype(np.float64), axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-4)
            if len(bad):
                report.add(f"{len(bad)} rows violate unit norm (first row {int(bad[0])})")

    if constraints is not None:
        soft_pairs = {(s.a, s.b) for s in constraints.soft_links}
        for h in constraints.hard_links:
            if (h.a, h.b) in soft_pairs:
                report.add(f"pair ({h.a}, {h.b}) is both hard and soft")
        for link in constraints.hard_links + constraints.soft_links:
            if link.a not in seen_ids or link.b not in seen_ids:
                report.add(f"link ({link.a}, {link.b}) references unknown patch")
            if link.a >= link.b:
                report.add(f"link ({link.a}, {link.b}) not stored with a < b")
        for s in constraints.soft_links:
            if not (soft_threshold <= s.confidence <= 1.0):
                report.add(f"soft link ({s.a}, {s.b}) confidence {s.confidence} outside [{soft_threshold}, 1]")
    return report
