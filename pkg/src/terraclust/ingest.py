"""Image ingestion: manifests, sliding-window patch extraction, baseline features."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import Eye, PatchRecord
from .formats import FormatError, read_depth, read_pnm

SOIL, ROCK, UNKNOWN = 0, 1, 255
FEATURE_DIM = 80


class ManifestError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RawImage:
    pixels: np.ndarray  # (H, W) or (H, W, 3) uint8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] not in (1, 3)):
            raise ValueError(f"unsupported pixel array shape {px.shape}")
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[:, :, 0]
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def gray(self) -> np.ndarray:
        return to_gray(self.pixels)


@dataclass
class ImageEntry:
    image_id: int
    path: Path
    width: int
    height: int
    site: int = 0
    drive: int = 0
    pose: int = 0
    rsm_count: int = 0
    eye: Eye = Eye.MONO
    within_range: bool = True
    depth_path: Path | None = None
    abs_depth_path: Path | None = None
    mask_path: Path | None = None
    class_map_path: Path | None = None
    extra: dict = field(default_factory=dict)
    image: RawImage | None = None
    depth: np.ndarray | None = None
    abs_depth: np.ndarray | None = None
    mask: np.ndarray | None = None
    class_map: np.ndarray | None = None

    @property
    def group(self) -> tuple[int, int, int]:
        return (self.site, self.drive, self.pose)


@dataclass
class Dataset:
    images: list[ImageEntry] = field(default_factory=list)
    root: Path | None = None

    def by_id(self) -> dict[int, ImageEntry]:
        return {im.image_id: im for im in self.images}

    def image_sizes(self) -> dict[int, tuple[int, int]]:
        return {im.image_id: (im.height, im.width) for im in self.images}


def to_gray(pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        return px
    return 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]


@lru_cache(maxsize=64)
def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input samples over ``[i*s, (i+1)*s)`` with ``s = n_in / n_out``."""
    scale = n_in / n_out
    edges = np.arange(n_out + 1) * scale
    M = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        j0, j1 = int(np.floor(lo)), min(int(np.ceil(hi)), n_in)
        for j in range(j0, j1):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                M[i, j] = overlap
        M[i] /= M[i].sum()
    M.setflags(write=False)
    return M


def resize_area(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-averaging resample of a 2-D float image (box filter when upsampling)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    return _area_matrix(h, out_h) @ img @ _area_matrix(w, out_w).T


def window_offsets(extent: int, patch_size: int, stride: int) -> np.ndarray:
    if extent < patch_size:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, extent - patch_size + 1, stride, dtype=np.int64)


def extract_patches(
    image: RawImage,
    patch_size: int,
    stride_fraction: float = 0.5,
    *,
    image_id: int = 0,
    start_id: int = 0,
    depth: np.ndarray | None = None,
    keep_depth_pixels: bool = True,
    site: int = 0,
    drive: int = 0,
    pose: int = 0,
    rsm_count: int = 0,
    eye: Eye = Eye.MONO,
) -> list[PatchRecord]:
    """Slide a square window over ``image`` at stride ``floor(patch_size * stride_fraction)``.

    Returns patches in row-major window order with consecutive ids from
    ``start_id``. An image smaller than the window yields an empty list.
    """
    if patch_size <= 0:
        raise ValueError("patch_size must be positive")
    if not 0 < stride_fraction <= 1:
        raise ValueError("stride_fraction must lie in (0, 1]")
    stride = max(1, int(np.floor(patch_size * stride_fraction)))
    if depth is not None and depth.shape != (image.height, image.width):
        raise ValueError("depth map dimensions differ from image")
    half = patch_size // 2
    out = []
    pid = start_id
    for r in window_offsets(image.height, patch_size, stride):
        for c in window_offsets(image.width, patch_size, stride):
            depth_px = None
            depth_mean = 0.0
            if depth is not None:
                crop = depth[r : r + patch_size, c : c + patch_size]
                depth_mean = float(np.mean(crop, dtype=np.float64))
                if keep_depth_pixels:
                    depth_px = np.ascontiguousarray(crop, dtype=np.float32).ravel()
            out.append(
                PatchRecord(
                    patch_id=pid,
                    image_id=image_id,
                    center_row=int(r) + half,
                    center_col=int(c) + half,
                    patch_size=patch_size,
                    depth_pixels=depth_px,
                    depth_mean=depth_mean,
                    site=site,
                    drive=drive,
                    pose=pose,
                    rsm_count=rsm_count,
                    eye=eye,
                )
            )
            pid += 1
    return out


def crop(array: np.ndarray, patch: PatchRecord) -> np.ndarray:
    r, c, s = patch.row0, patch.col0, patch.patch_size
    return array[r : r + s, c : c + s]


def patch_size_for(entry: ImageEntry, patch_sizes: Sequence[int]) -> int:
    """First size for Left/Mono eyes, second (if given) for the Right eye."""
    if len(patch_sizes) > 1 and entry.eye == Eye.RIGHT:
        return int(patch_sizes[1])
    return int(patch_sizes[0])


def extract_dataset(
    dataset: Dataset,
    patch_sizes: Sequence[int] = (128, 256),
    stride_fraction: float = 0.5,
    keep_depth_pixels: bool = False,
) -> list[PatchRecord]:
    """Extract patches from every in-range image, ordered by (image_id, row, col)."""
    patches: list[PatchRecord] = []
    for entry in sorted(dataset.images, key=lambda e: e.image_id):
        if not entry.within_range:
            continue
        patches += extract_patches(
            load_image(entry),
            patch_size_for(entry, patch_sizes),
            stride_fraction,
            image_id=entry.image_id,
            start_id=len(patches),
            depth=entry.depth,
            keep_depth_pixels=keep_depth_pixels,
            site=entry.site,
            drive=entry.drive,
            pose=entry.pose,
            rsm_count=entry.rsm_count,
            eye=entry.eye,
        )
    return patches


# -- manifest -------------------------------------------------------------------


def load_image(entry: ImageEntry) -> RawImage:
    if entry.image is None:
        entry.image = RawImage(read_pnm(entry.path))
    return entry.image


def load_manifest(path) -> Dataset:
    """Parse a JSON manifest and load every referenced file eagerly.

    Missing optional depth/mask files leave those channels as ``None``.
    Malformed JSON, a missing image, or mismatched channel dimensions raise
    :class:`ManifestError` naming the offending entry.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: cannot parse manifest: {exc}") from exc
    records = doc.get("images", []) if isinstance(doc, dict) else doc
    if not isinstance(records, list):
        raise ManifestError(f"{path}: 'images' must be a list")
    root = path.parent
    dataset = Dataset(root=root)

    def opt_path(rec, key):
        value = rec.get(key)
        if not value:
            return None
        p = root / value
        return p if p.exists() else None

    for idx, rec in enumerate(records):
        name = rec.get("path", f"#{idx}")
        try:
            img_path = root / rec["path"]
            entry = ImageEntry(
                image_id=int(rec.get("image_id", idx)),
                path=img_path,
                width=int(rec["width"]),
                height=int(rec["height"]),
                site=int(rec.get("site", 0)),
                drive=int(rec.get("drive", 0)),
                pose=int(rec.get("pose", 0)),
                rsm_count=int(rec.get("rsm_count", 0)),
                eye=Eye(rec.get("eye", "Mono")),
                within_range=bool(rec.get("within_range", True)),
                depth_path=opt_path(rec, "depth"),
                abs_depth_path=opt_path(rec, "abs_depth"),
                mask_path=opt_path(rec, "mask"),
                class_map_path=opt_path(rec, "class_map"),
                extra={k: v for k, v in rec.items() if k in ("stereo_truth", "rsm_truth")},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"manifest entry {name!r}: {exc}") from exc
        if not entry.path.exists():
            raise ManifestError(f"manifest entry {name!r}: image file not found")
        try:
            image = load_image(entry)
            shape = (entry.height, entry.width)
            if (image.height, image.width) != shape:
                raise ManifestError(
                    f"manifest entry {name!r}: image is {image.width}x{image.height}, "
                    f"manifest says {entry.width}x{entry.height}"
                )
            if entry.depth_path is not None:
                entry.depth = read_depth(entry.depth_path)
            if entry.abs_depth_path is not None:
                entry.abs_depth = read_depth(entry.abs_depth_path)
            if entry.mask_path is not None:
                entry.mask = read_pnm(entry.mask_path)
            if entry.class_map_path is not None:
                entry.class_map = read_pnm(entry.class_map_path)
        except FormatError as exc:
            raise ManifestError(f"manifest entry {name!r}: {exc}") from exc
        for label, arr in (
            ("depth map", entry.depth),
            ("absolute depth map", entry.abs_depth),
            ("mask", entry.mask),
            ("class map", entry.class_map),
        ):
            if arr is not None and arr.shape[:2] != shape:
                raise ManifestError(
                    f"manifest entry {name!r}: {label} is {arr.shape[1]}x{arr.shape[0]}, "
                    f"image is {entry.width}x{entry.height} (dimension mismatch)"
                )
        dataset.images.append(entry)
    return dataset


# -- baseline features ----------------------------------------------------------


def baseline_featurize(crop_pixels: np.ndarray) -> np.ndarray:
    """80-dim texture descriptor: 8x8 block-mean grid plus a 16-bin edge-orientation histogram.

    The crop is converted to gray, area-resampled to 64x64, block means are
    scaled to [0, 1]. Orientations are edge directions (a vertical edge votes
    at pi/2) from central differences, weighted by gradient magnitude, and the
    histogram is L1-normalised (all zeros for a flat crop).
    """
    px = np.asarray(crop_pixels)
    if px.ndim < 2 or px.shape[0] == 0 or px.shape[1] == 0:
        raise ValueError("empty crop")
    if px.shape[0] != px.shape[1]:
        raise ValueError(f"crop must be square, got {px.shape[:2]}")
    g = resize_area(to_gray(px), 64, 64) / 255.0
    blocks = g.reshape(8, 8, 8, 8).mean(axis=(1, 3)).ravel()

    gx = (g[1:-1, 2:] - g[1:-1, :-2]) / 2.0
    gy = (g[2:, 1:-1] - g[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gx, -gy), np.pi)
    bins = np.minimum((theta * (16 / np.pi)).astype(np.int64), 15)
    hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=16)
    total = hist.sum()
    if total > 0:
        hist = hist / total
    return np.concatenate([blocks, hist])


class BaselineFeaturizer(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping a stack of square crops to 80-dim features."""

    def fit(self, X=None, y=None):
        return self

    def transform(self, crops) -> np.ndarray:
        return np.stack([baseline_featurize(c) for c in crops]) if len(crops) else np.zeros((0, FEATURE_DIM))


def featurize_patches(dataset: Dataset, patches: Sequence[PatchRecord]) -> np.ndarray:
    images = dataset.by_id()
    feats = np.zeros((len(patches), FEATURE_DIM))
    for i, p in enumerate(patches):
        feats[i] = baseline_featurize(crop(load_image(images[p.image_id]).pixels, p))
    return feats
