"""Rule-based patch filtering from segmentation masks and depth."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import FilterClass, PatchRecord
from .ingest import ROCK, SOIL, UNKNOWN, Dataset, crop


@dataclass(frozen=True)
class Component:
    size: int
    bbox: tuple[int, int, int, int]  # row0, col0, row1 (exclusive), col1 (exclusive)


@dataclass(frozen=True)
class FilterConfig:
    single_class_fraction: float = 0.70
    soil_fraction: float = 0.70
    max_rock_components: int = 10
    depth_cutoff: float = 10.0
    # used only when no absolute-depth channel exists; None disables the rule
    relative_depth_cutoff: float | None = None
    connectivity: int = 4
    min_component_size: int = 1


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def connected_components(mask_crop: np.ndarray, class_code: int, connectivity: int = 4) -> list[Component]:
    """Components of pixels equal to ``class_code``, largest first."""
    mask_crop = np.asarray(mask_crop)
    if mask_crop.size == 0:
        raise ValueError("empty mask crop")
    labels, n = ndimage.label(mask_crop == class_code, structure=_STRUCTURES[connectivity])
    if n == 0:
        return []
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    slices = ndimage.find_objects(labels)
    comps = [
        Component(int(sizes[i]), (s[0].start, s[1].start, s[0].stop, s[1].stop))
        for i, s in enumerate(slices)
    ]
    comps.sort(key=lambda c: (-c.size, c.bbox))
    return comps


def classify_patch(
    patch: PatchRecord | None,
    mask_crop: np.ndarray | None,
    depth_crop: np.ndarray | None = None,
    config: FilterConfig = FilterConfig(),
    depth_is_absolute: bool = True,
) -> FilterClass:
    """Apply the distant / mixed / soil / pebbly / rock rules in that order.

    Unknown mask pixels (255) are left out of every fraction. A patch with no
    mask, or with no labelled pixels, stays Unfiltered.
    """
    if mask_crop is None:
        return FilterClass.UNFILTERED
    mask_crop = np.asarray(mask_crop)

    if depth_crop is not None:
        cutoff = config.depth_cutoff if depth_is_absolute else config.relative_depth_cutoff
        if cutoff is not None and float(np.mean(depth_crop, dtype=np.float64)) > cutoff:
            return FilterClass.DISTANT

    labelled = mask_crop != UNKNOWN
    total = int(np.count_nonzero(labelled))
    if total == 0:
        return FilterClass.UNFILTERED
    counts = np.bincount(mask_crop[labelled].ravel(), minlength=256)
    if counts.max() / total < config.single_class_fraction:
        return FilterClass.MIXED
    if counts[SOIL] / total > config.soil_fraction:
        return FilterClass.SOIL
    comps = connected_components(mask_crop, ROCK, config.connectivity)
    n_rock = sum(1 for c in comps if c.size >= config.min_component_size)
    if n_rock > config.max_rock_components:
        return FilterClass.PEBBLY
    return FilterClass.ROCK


def filter_patches(
    dataset: Dataset, patches: Sequence[PatchRecord], config: FilterConfig = FilterConfig()
) -> list[PatchRecord]:
    """Return copies of ``patches`` with ``filter_class`` set from their image's mask."""
    images = dataset.by_id()
    out = []
    for p in patches:
        entry = images[p.image_id]
        mask = None if entry.mask is None else crop(entry.mask, p)
        if entry.abs_depth is not None:
            depth, absolute = crop(entry.abs_depth, p), True
        elif entry.depth is not None:
            depth, absolute = crop(entry.depth, p), False
        else:
            depth, absolute = None, True
        out.append(p.evolve(filter_class=classify_patch(p, mask, depth, config, absolute)))
    return out
