"""Pairwise must-link generation.

Soft links come from spatial proximity and depth agreement between patches of
the same image. Hard links come from stereo (left/right eye) pairs and from
image pairs two RSM counts apart, both located by zero-normalised
cross-correlation template matching.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from .core import ConstraintSet, Eye, HardLink, LinkSource, PatchRecord, SoftLink
from .ingest import Dataset, ImageEntry, crop, load_image, resize_area

log = logging.getLogger(__name__)


class DepthUnavailable(ValueError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityConfig:
    alpha: float = 0.5
    beta: float = 0.5
    sigma_spatial: float = 512.0
    sigma_depth: float = 6.0
    threshold: float = 0.7
    candidate_radius: float | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("alpha and beta must be non-negative with a positive sum")
        if self.sigma_spatial <= 0 or self.sigma_depth <= 0:
            raise ValueError("sigmas must be positive")
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")


@dataclass(frozen=True)
class LRConfig:
    focal_ratio: float = 34 / 100
    min_score: float = 0.6
    min_overlap: float = 0.5
    # "coverage": intersection / footprint area; "iou": intersection / union
    overlap: str = "coverage"


@dataclass(frozen=True)
class RSMConfig:
    search_fraction: float = 0.25
    min_score: float = 0.8
    rsm_gap: int = 2
    # re-match the matched window back into image A and drop the link unless
    # it lands within backward_tol px of the source (rejects border-clipped matches)
    backward_check: bool = True
    backward_tol: int = 1


@dataclass
class LRResult:
    links: list[HardLink] = field(default_factory=list)
    skipped: bool = False
    origin: tuple[int, int] | None = None
    score: float = 0.0
    template_shape: tuple[int, int] | None = None


# -- similarity -----------------------------------------------------------------


def spatial_distance(p1: PatchRecord, p2: PatchRecord) -> float:
    if p1.image_id != p2.image_id:
        raise ValueError(f"patches {p1.patch_id} and {p2.patch_id} come from different images")
    return float((p1.center_row - p2.center_row) ** 2 + (p1.center_col - p2.center_col) ** 2)


def depth_distance(p1: PatchRecord, p2: PatchRecord) -> float:
    if p1.depth_pixels is None or p2.depth_pixels is None:
        raise DepthUnavailable(f"depth unavailable for pair ({p1.patch_id}, {p2.patch_id})")
    d1 = np.asarray(p1.depth_pixels, dtype=np.float64).ravel()
    d2 = np.asarray(p2.depth_pixels, dtype=np.float64).ravel()
    if d1.shape != d2.shape:
        raise ValueError("depth vectors differ in length")
    return float(np.mean((d1 - d2) ** 2))


def similarity_from_distances(d_spatial, d_depth, cfg: SimilarityConfig = SimilarityConfig()):
    """Gaussian-kernel blend of the two distances; ``d_depth=None`` means spatial only."""
    spatial_term = np.exp(-np.asarray(d_spatial, dtype=np.float64) / (2 * cfg.sigma_spatial**2))
    if d_depth is None:
        # weights renormalised so that identical patches still score 1
        return spatial_term if cfg.alpha > 0 else np.zeros_like(spatial_term)
    depth_term = np.exp(-np.asarray(d_depth, dtype=np.float64) / (2 * cfg.sigma_depth**2))
    return cfg.alpha * spatial_term + cfg.beta * depth_term


def soft_similarity(p1: PatchRecord, p2: PatchRecord, cfg: SimilarityConfig = SimilarityConfig()) -> float:
    ds = spatial_distance(p1, p2)
    try:
        dd = depth_distance(p1, p2)
    except DepthUnavailable:
        dd = None
    return float(similarity_from_distances(ds, dd, cfg))


def _depth_stack(patches: Sequence[PatchRecord], depth: np.ndarray | None) -> np.ndarray | None:
    if all(p.depth_pixels is not None for p in patches):
        return np.stack([np.asarray(p.depth_pixels, dtype=np.float64).ravel() for p in patches])
    if depth is None:
        return None
    return np.stack([crop(depth, p).astype(np.float64).ravel() for p in patches])


def neighbor_links_for_image(
    patches: Sequence[PatchRecord],
    cfg: SimilarityConfig = SimilarityConfig(),
    depth: np.ndarray | None = None,
) -> list[SoftLink]:
    """Soft links among patches of one image (pairs only within equal patch sizes)."""
    links: list[SoftLink] = []
    by_size: dict[int, list[PatchRecord]] = {}
    for p in patches:
        by_size.setdefault(p.patch_size, []).append(p)
    for group in by_size.values():
        links += _neighbor_links_same_size(group, cfg, depth)
    return links


def _neighbor_links_same_size(patches, cfg, depth) -> list[SoftLink]:
    n = len(patches)
    if n < 2:
        return []
    centers = np.array([(p.center_row, p.center_col) for p in patches], dtype=np.int64)
    ids = np.array([p.patch_id for p in patches], dtype=np.int64)
    D = _depth_stack(patches, depth)
    use_depth = D is not None and cfg.beta > 0
    cutoff = 9.0 * cfg.sigma_spatial**2
    if cfg.candidate_radius is not None:
        cutoff = min(cutoff, float(cfg.candidate_radius) ** 2)
    if use_depth:
        means = D.mean(axis=1)
    two_sd2 = 2 * cfg.sigma_depth**2

    links = []
    for i in range(n - 1):
        js = np.arange(i + 1, n)
        diff = centers[js] - centers[i]
        ds = (diff**2).sum(axis=1).astype(np.float64)
        keep = ds <= cutoff
        js, ds = js[keep], ds[keep]
        if not len(js):
            continue
        if not use_depth:
            sims = similarity_from_distances(ds, None, cfg)
        else:
            # (mean1 - mean2)^2 lower-bounds the mean squared difference, so this
            # only drops pairs that cannot reach the threshold
            lower = (means[js] - means[i]) ** 2 * (1 - 1e-9) - 1e-12
            upper = cfg.alpha * np.exp(-ds / (2 * cfg.sigma_spatial**2)) + cfg.beta * np.exp(
                -np.maximum(lower, 0) / two_sd2
            )
            keep = upper >= cfg.threshold
            js, ds = js[keep], ds[keep]
            if not len(js):
                continue
            dd = np.mean((D[js] - D[i]) ** 2, axis=1)
            sims = similarity_from_distances(ds, dd, cfg)
        for j, s in zip(js, sims):
            if s >= cfg.threshold:
                links.append(SoftLink(int(ids[i]), int(ids[j]), float(s), LinkSource.NEIGHBOR))
    return links


def generate_neighbor_constraints(
    patches: Sequence[PatchRecord],
    cfg: SimilarityConfig = SimilarityConfig(),
    depth_maps: dict[int, np.ndarray] | None = None,
) -> list[SoftLink]:
    """All soft links over a patch list, grouped per image, sorted by (a, b)."""
    by_image: dict[int, list[PatchRecord]] = {}
    for p in patches:
        by_image.setdefault(p.image_id, []).append(p)
    links: list[SoftLink] = []
    for image_id in sorted(by_image):
        depth = None if depth_maps is None else depth_maps.get(image_id)
        links += neighbor_links_for_image(by_image[image_id], cfg, depth)
    links = [SoftLink(min(l.a, l.b), max(l.a, l.b), l.confidence, l.source) for l in links]
    links.sort(key=lambda l: (l.a, l.b))
    return links


# -- normalised cross-correlation -------------------------------------------------


def _window_sums(img: np.ndarray, h: int, w: int) -> np.ndarray:
    c = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    c[1:, 1:] = img.cumsum(0).cumsum(1)
    return c[h:, w:] - c[:-h, w:] - c[h:, :-w] + c[:-h, :-w]


def ncc_map(template: np.ndarray, scene: np.ndarray) -> np.ndarray:
    """Zero-normalised cross-correlation at every valid placement (top-left indexed).

    Placements where the scene window or the template has zero variance
    score 0.
    """
    T = np.asarray(template, dtype=np.float64)
    S = np.asarray(scene, dtype=np.float64)
    th, tw = T.shape
    if th > S.shape[0] or tw > S.shape[1]:
        raise ValueError(f"template {T.shape} larger than scene {S.shape}")
    n = th * tw
    Tz = T - T.mean()
    t_norm = math.sqrt(float((Tz**2).sum()))
    out_shape = (S.shape[0] - th + 1, S.shape[1] - tw + 1)
    if t_norm <= 1e-12 * max(1.0, float(np.abs(T).max())) * math.sqrt(n):
        return np.zeros(out_shape)
    S = S - S.mean()
    num = fftconvolve(S, Tz[::-1, ::-1], mode="valid")
    s1 = _window_sums(S, th, tw)
    s2 = _window_sums(S * S, th, tw)
    var = s2 - s1 * s1 / n
    floor = 1e-10 * n * max(1.0, float((S * S).max()))
    score = np.zeros(out_shape)
    ok = var > floor
    score[ok] = num[ok] / (t_norm * np.sqrt(var[ok]))
    return np.clip(score, -1.0, 1.0)


def scale_image(img: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return np.asarray(img, dtype=np.float64)
    h, w = img.shape
    oh, ow = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    return resize_area(img, oh, ow)


def ncc_match(template: np.ndarray, scene: np.ndarray, scale: float = 1.0) -> tuple[int, int, float]:
    """Best placement ``(row, col, score)`` of the rescaled template in the scene.

    Ties go to the smallest (row, col).
    """
    T = scale_image(np.asarray(template, dtype=np.float64), scale)
    if T.shape[0] > scene.shape[0] or T.shape[1] > scene.shape[1]:
        raise ValueError(f"scaled template {T.shape} does not fit scene {scene.shape}")
    scores = ncc_map(T, scene)
    flat = int(np.argmax(scores))
    r, c = divmod(flat, scores.shape[1])
    return r, c, float(scores[r, c])


# -- stereo (left / right eye) ----------------------------------------------------


def _overlap(fr0, fc0, fh, fw, lr0, lc0, ls, measure: str) -> float:
    ih = max(0.0, min(fr0 + fh, lr0 + ls) - max(fr0, lr0))
    iw = max(0.0, min(fc0 + fw, lc0 + ls) - max(fc0, lc0))
    inter = ih * iw
    if measure == "iou":
        return inter / (fh * fw + ls * ls - inter)
    if measure == "coverage":
        return inter / (fh * fw)
    raise ValueError(f"unknown overlap measure {measure!r}")


def footprint_links(
    right_patches: Sequence[PatchRecord],
    left_patches: Sequence[PatchRecord],
    origin: tuple[float, float],
    scale: tuple[float, float],
    cfg: LRConfig = LRConfig(),
) -> list[HardLink]:
    """Map each right-eye window into left-image coordinates and link it to the
    left window of greatest overlap, if that overlap reaches ``cfg.min_overlap``.

    ``origin`` is the top-left of the right image inside the left one and
    ``scale`` the (row, col) size ratio left-pixels per right-pixel.
    """
    links = []
    if not left_patches:
        return links
    L = np.array([(p.row0, p.col0, p.patch_size, p.patch_id) for p in left_patches], dtype=np.float64)
    for rp in right_patches:
        fr0 = origin[0] + rp.row0 * scale[0]
        fc0 = origin[1] + rp.col0 * scale[1]
        fh, fw = rp.patch_size * scale[0], rp.patch_size * scale[1]
        ih = np.clip(np.minimum(fr0 + fh, L[:, 0] + L[:, 2]) - np.maximum(fr0, L[:, 0]), 0, None)
        iw = np.clip(np.minimum(fc0 + fw, L[:, 1] + L[:, 2]) - np.maximum(fc0, L[:, 1]), 0, None)
        inter = ih * iw
        best = int(np.argmax(inter))  # first maximum: lowest position in left order
        if inter[best] <= 0:
            continue
        lp = left_patches[best]
        ov = _overlap(fr0, fc0, fh, fw, lp.row0, lp.col0, lp.patch_size, cfg.overlap)
        if ov >= cfg.min_overlap:
            a, b = sorted((rp.patch_id, lp.patch_id))
            links.append(HardLink(a, b, LinkSource.LR))
    return links


def generate_lr_constraints(
    left: ImageEntry,
    left_patches: Sequence[PatchRecord],
    right: ImageEntry,
    right_patches: Sequence[PatchRecord],
    cfg: LRConfig = LRConfig(),
) -> LRResult:
    """Localise the downscaled right image inside the left and link overlapping windows."""
    if left.eye != Eye.LEFT or right.eye != Eye.RIGHT:
        raise PreconditionError("LR pairing needs one Left-eye and one Right-eye image")
    if (left.site, left.drive, left.pose, left.rsm_count) != (
        right.site,
        right.drive,
        right.pose,
        right.rsm_count,
    ):
        raise PreconditionError(
            f"images {left.image_id} and {right.image_id} differ in site/drive/pose/rsm"
        )
    template = scale_image(load_image(right).gray(), cfg.focal_ratio)
    r, c, score = ncc_match(template, load_image(left).gray(), 1.0)
    result = LRResult(origin=(r, c), score=score, template_shape=template.shape)
    if score < cfg.min_score:
        result.skipped = True
        log.info("LR pair (%d, %d) skipped: localisation score %.3f", left.image_id, right.image_id, score)
        return result
    scale = (template.shape[0] / right.height, template.shape[1] / right.width)
    result.links = footprint_links(right_patches, left_patches, (r, c), scale, cfg)
    return result


# -- RSM pairs ---------------------------------------------------------------------


def nearest_window(patches: Sequence[PatchRecord], row0: float, col0: float, contains=None):
    """Window whose top-left is nearest to ``(row0, col0)``; ties to the earliest patch.

    ``contains`` optionally restricts candidates to windows containing that point.
    """
    best, best_d = None, None
    for p in patches:
        if contains is not None:
            pr, pc = contains
            if not (p.row0 <= pr < p.row0 + p.patch_size and p.col0 <= pc < p.col0 + p.patch_size):
                continue
        d = (p.row0 - row0) ** 2 + (p.col0 - col0) ** 2
        if best_d is None or d < best_d:
            best, best_d = p, d
    return best


def generate_rsm_constraints(
    img_a: ImageEntry,
    patches_a: Sequence[PatchRecord],
    img_b: ImageEntry,
    patches_b: Sequence[PatchRecord],
    cfg: RSMConfig = RSMConfig(),
) -> list[HardLink]:
    """Track every patch of ``img_a`` into ``img_b`` by windowed NCC search."""
    if (img_a.site, img_a.drive, img_a.pose) != (img_b.site, img_b.drive, img_b.pose):
        raise PreconditionError("RSM pairs must share site, drive and pose")
    if abs(img_a.rsm_count - img_b.rsm_count) != cfg.rsm_gap:
        raise PreconditionError(
            f"RSM counts {img_a.rsm_count} and {img_b.rsm_count} do not differ by {cfg.rsm_gap}"
        )
    ga, gb = load_image(img_a).gray(), load_image(img_b).gray()
    H, W = gb.shape
    mr, mc = int(round(cfg.search_fraction * H)), int(round(cfg.search_fraction * W))
    by_size: dict[int, list[PatchRecord]] = {}
    for p in patches_b:
        by_size.setdefault(p.patch_size, []).append(p)
    links = []
    for pa in patches_a:
        candidates = by_size.get(pa.patch_size)
        if not candidates:
            continue
        s = pa.patch_size
        r0, r1 = max(0, pa.row0 - mr), min(H, pa.row0 + s + mr)
        c0, c1 = max(0, pa.col0 - mc), min(W, pa.col0 + s + mc)
        if r1 - r0 < s or c1 - c0 < s:
            continue
        r, c, score = ncc_match(crop(ga, pa), gb[r0:r1, c0:c1])
        if score < cfg.min_score:
            continue
        mrow, mcol = r0 + r, c0 + c
        target = nearest_window(candidates, mrow, mcol, contains=(mrow + s // 2, mcol + s // 2))
        if target is None:
            continue
        if cfg.backward_check and not _tracks_back(ga, gb[mrow:mrow + s, mcol:mcol + s], pa, (mr, mc), cfg.backward_tol):
            continue
        a, b = sorted((pa.patch_id, target.patch_id))
        links.append(HardLink(a, b, LinkSource.RSM))
    return links


def _tracks_back(ga, window, pa, margin, tol) -> bool:
    """Search the matched window back in A; it must land on ``pa``."""
    s = pa.patch_size
    H, W = ga.shape
    r0, r1 = max(0, pa.row0 - margin[0]), min(H, pa.row0 + s + margin[0])
    c0, c1 = max(0, pa.col0 - margin[1]), min(W, pa.col0 + s + margin[1])
    r, c, _ = ncc_match(window, ga[r0:r1, c0:c1])
    return abs(r0 + r - pa.row0) <= tol and abs(c0 + c - pa.col0) <= tol


# -- dataset level ----------------------------------------------------------------


@dataclass(frozen=True)
class ConstraintConfig:
    similarity: SimilarityConfig = SimilarityConfig()
    lr: LRConfig = LRConfig()
    rsm: RSMConfig = RSMConfig()
    sources: tuple[str, ...] = ("Neighbor", "LR", "RSM")


@dataclass
class ConstraintReport:
    constraints: ConstraintSet
    lr_skips: list[tuple[int, int]] = field(default_factory=list)
    lr_results: dict[tuple[int, int], LRResult] = field(default_factory=dict)


def find_lr_pairs(dataset: Dataset) -> list[tuple[ImageEntry, ImageEntry]]:
    lefts, rights = {}, {}
    for im in dataset.images:
        key = (im.site, im.drive, im.pose, im.rsm_count)
        if im.eye == Eye.LEFT:
            lefts.setdefault(key, im)
        elif im.eye == Eye.RIGHT:
            rights.setdefault(key, im)
    return [(lefts[k], rights[k]) for k in sorted(lefts) if k in rights]


def find_rsm_pairs(dataset: Dataset, gap: int = 2) -> list[tuple[ImageEntry, ImageEntry]]:
    """Same site/drive/pose/eye, RSM counts exactly ``gap`` apart (earlier image first)."""
    index = {}
    for im in dataset.images:
        index.setdefault((im.site, im.drive, im.pose, im.eye, im.rsm_count), im)
    pairs = []
    for (site, drive, pose, eye, rsm), im in sorted(index.items(), key=lambda kv: kv[1].image_id):
        partner = index.get((site, drive, pose, eye, rsm + gap))
        if partner is not None and eye != Eye.RIGHT:
            pairs.append((im, partner))
    return pairs


def generate_constraints(
    dataset: Dataset, patches: Sequence[PatchRecord], cfg: ConstraintConfig = ConstraintConfig()
) -> ConstraintReport:
    """Run every enabled generator and merge into one deduplicated set."""
    sources = {LinkSource(s) for s in cfg.sources}
    by_image: dict[int, list[PatchRecord]] = {}
    for p in patches:
        by_image.setdefault(p.image_id, []).append(p)
    soft: list[SoftLink] = []
    hard: list[HardLink] = []
    report = ConstraintReport(ConstraintSet())
    if LinkSource.NEIGHBOR in sources:
        depth_maps = {im.image_id: im.depth for im in dataset.images if im.depth is not None}
        soft = generate_neighbor_constraints(patches, cfg.similarity, depth_maps)
    if LinkSource.LR in sources:
        for left, right in find_lr_pairs(dataset):
            res = generate_lr_constraints(
                left, by_image.get(left.image_id, []), right, by_image.get(right.image_id, []), cfg.lr
            )
            report.lr_results[(left.image_id, right.image_id)] = res
            if res.skipped:
                report.lr_skips.append((left.image_id, right.image_id))
            hard += res.links
    if LinkSource.RSM in sources:
        for a, b in find_rsm_pairs(dataset, cfg.rsm.rsm_gap):
            hard += generate_rsm_constraints(
                a, by_image.get(a.image_id, []), b, by_image.get(b.image_id, []), cfg.rsm
            )
    report.constraints = ConstraintSet.build(hard, soft)
    return report
