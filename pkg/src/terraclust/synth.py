"""Synthetic terrain scenes with ground truth.

A scene is a grid of rectangular regions, each textured with its class's
oriented sinusoidal grating. Regions carry a multiplicative brightness
nuisance and a depth offset on top of a top-to-bottom depth ramp. The
texture is rendered on a canvas wider than the camera frame so that
translated (RSM) views show real scene content at their edges.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Eye
from .formats import write_depth, write_pnm
from .ingest import ROCK, SOIL, Dataset, ImageEntry, RawImage

REFERENCE_PATCH = 128
PIXEL_MIN, PIXEL_MAX = 20, 235


@dataclass(frozen=True)
class SceneConfig:
    n_classes: int = 8
    image_size: int = 1024
    regions: int = 4
    depth_ramp: float = 20.0
    depth_step: float = 12.0
    brightness_sigma: float = 0.25
    noise_sigma: float = 0.05
    base_level: float = 0.5
    amplitude: float = 0.1
    margin_fraction: float = 0.25
    frequencies: tuple[float, ...] | None = None
    orientations: tuple[float, ...] | None = None
    seed: int = 0


def class_parameters(cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-class grating frequency (cycles per 128 px) and orientation (radians).

    Orientations are evenly spread over [0, pi); frequencies geometrically
    over [4, 16]. Below ~4 cycles the gradient of a 0.1-amplitude grating
    sinks into 5% pixel noise once patches are resized to 64 px.
    """
    n = cfg.n_classes
    if cfg.frequencies is not None:
        freqs = np.asarray(cfg.frequencies, dtype=np.float64)
    else:
        freqs = 4.0 * 4.0 ** (np.arange(n) / max(n - 1, 1))
    if cfg.orientations is not None:
        thetas = np.asarray(cfg.orientations, dtype=np.float64)
    else:
        thetas = np.arange(n) * np.pi / n
    return freqs, thetas


@dataclass
class Scene:
    canvas: np.ndarray  # float intensities, pre-quantisation
    depth: np.ndarray
    class_map: np.ndarray  # uint8 region class per pixel
    origin: tuple[int, int]  # frame top-left inside the canvas
    size: int
    config: SceneConfig

    def frame(self, array: np.ndarray, shift: tuple[int, int] = (0, 0)) -> np.ndarray:
        r = self.origin[0] - shift[0]
        c = self.origin[1] - shift[1]
        return array[r : r + self.size, c : c + self.size]

    @property
    def image(self) -> np.ndarray:
        return quantize(self.frame(self.canvas))

    @property
    def depth_map(self) -> np.ndarray:
        return self.frame(self.depth).astype(np.float32)

    @property
    def labels(self) -> np.ndarray:
        return self.frame(self.class_map).copy()

    @property
    def mask(self) -> np.ndarray:
        return mask_from_classes(self.labels)


def quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), PIXEL_MIN, PIXEL_MAX).astype(np.uint8)


def mask_from_classes(class_map: np.ndarray) -> np.ndarray:
    """Even classes are rock, odd classes soil."""
    return np.where(class_map % 2 == 0, ROCK, SOIL).astype(np.uint8)


def generate_scene(cfg: SceneConfig = SceneConfig()) -> Scene:
    if cfg.n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    margin = int(np.ceil(cfg.margin_fraction * size))
    full = size + 2 * margin
    R = cfg.regions
    # region grid spans the frame; outer canvas rows/cols extend the border regions
    region_classes = np.resize(np.arange(cfg.n_classes), R * R)
    rng.shuffle(region_classes)
    region_classes = region_classes.reshape(R, R)
    brightness = np.clip(rng.normal(1.0, cfg.brightness_sigma, size=(R, R)), 0.2, None)
    phases = rng.uniform(0, 2 * np.pi, size=(R, R))
    offsets = cfg.depth_step * rng.permutation(R * R).reshape(R, R)

    coords = np.arange(full) - margin
    region_idx = np.clip(coords * R // size, 0, R - 1)
    rows = region_idx[:, None].repeat(full, axis=1)
    cols = region_idx[None, :].repeat(full, axis=0)
    cls = region_classes[rows, cols]

    freqs, thetas = class_parameters(cfg)
    yy, xx = np.meshgrid(coords.astype(np.float64), coords.astype(np.float64), indexing="ij")
    k = 2 * np.pi * freqs[cls] / REFERENCE_PATCH
    wave = np.sin(k * (xx * np.cos(thetas[cls]) + yy * np.sin(thetas[cls])) + phases[rows, cols])
    noise = rng.normal(0.0, cfg.noise_sigma, size=(full, full))
    canvas = 255.0 * brightness[rows, cols] * (cfg.base_level + cfg.amplitude * wave + noise)

    depth = cfg.depth_ramp * np.clip(yy, 0, size) / size + offsets[rows, cols]
    return Scene(canvas, depth, cls.astype(np.uint8), (margin, margin), size, cfg)


def generate_stereo_pair(scene: Scene, focal_ratio: float = 34 / 100):
    """Left = frame; right = central crop of side ``focal_ratio * size`` upsampled back.

    Returns ``(left, right, truth)``; ``truth`` holds the crop origin and
    side in left pixels, plus the right eye's depth and class maps.
    """
    size = scene.size
    side = int(round(focal_ratio * size))
    if not 0 < side <= size:
        raise ValueError("focal ratio must give a crop inside the frame")
    r0 = c0 = (size - side) // 2
    frame = scene.frame(scene.canvas)
    crop_vals = frame[r0 : r0 + side, c0 : c0 + side]
    # bilinear resampling at pixel centres of the upsampled grid
    src = (np.arange(size) + 0.5) * side / size - 0.5
    gy, gx = np.meshgrid(src, src, indexing="ij")
    right = ndimage.map_coordinates(crop_vals, [gy, gx], order=1, mode="nearest")
    nearest = np.clip(np.floor((np.arange(size) + 0.5) * side / size).astype(int), 0, side - 1)
    labels = scene.labels[r0 : r0 + side, c0 : c0 + side][np.ix_(nearest, nearest)]
    depth = scene.depth_map[r0 : r0 + side, c0 : c0 + side]
    right_depth = ndimage.map_coordinates(depth.astype(np.float64), [gy, gx], order=1, mode="nearest")
    truth = {
        "origin": [r0, c0],
        "side": side,
        "labels": labels,
        "depth": right_depth.astype(np.float32),
    }
    return scene.image, quantize(right), truth


def generate_rsm_pair(scene: Scene, shift: tuple[int, int], brightness_delta: float = 0.0):
    """``img_b`` shows the scene moved by ``shift`` (rows, cols) plus a global offset.

    Returns ``(img_a, img_b, truth)`` with the shifted depth and class maps.
    """
    dy, dx = int(shift[0]), int(shift[1])
    margin = scene.origin[0]
    if abs(dy) > margin or abs(dx) > margin or max(abs(dy), abs(dx)) >= 0.25 * scene.size:
        raise ValueError("shift must stay below 25% of the image size")
    img_b = quantize(scene.frame(scene.canvas, (dy, dx)))
    img_b = np.clip(img_b.astype(np.int64) + int(round(brightness_delta)), 0, 255).astype(np.uint8)
    truth = {
        "shift": [dy, dx],
        "labels": scene.frame(scene.class_map, (dy, dx)).copy(),
        "depth": scene.frame(scene.depth, (dy, dx)).astype(np.float32),
    }
    return scene.image, img_b, truth


# -- whole datasets ----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    n_scenes: int = 20
    scene: SceneConfig = SceneConfig()
    stereo: bool = True
    focal_ratio: float = 34 / 100
    rsm_fraction: float = 1.0
    rsm_max_shift: float = 0.10
    rsm_brightness: float = 20.0
    seed: int = 7


@dataclass
class SyntheticDataset:
    dataset: Dataset
    class_maps: dict[int, np.ndarray] = field(default_factory=dict)
    stereo_truth: dict[int, dict] = field(default_factory=dict)  # keyed by right image id
    rsm_truth: dict[int, dict] = field(default_factory=dict)  # keyed by img_b id
    config: DatasetConfig | None = None


def generate_dataset(cfg: DatasetConfig = DatasetConfig()) -> SyntheticDataset:
    """Scenes with left frames, optional right-eye views and RSM partners.

    Scene ``s`` uses ``site = drive = s``; its RSM partner has
    ``rsm_count + 2``.
    """
    rng = np.random.default_rng(cfg.seed)
    ds = Dataset()
    out = SyntheticDataset(ds, config=cfg)
    scene_seeds = rng.integers(0, 2**31 - 1, size=cfg.n_scenes)
    n_rsm = int(round(cfg.rsm_fraction * cfg.n_scenes))
    max_shift = int(cfg.rsm_max_shift * cfg.scene.image_size)

    def add(img, depth, labels, eye, site, rsm, **extra):
        image_id = len(ds.images)
        entry = ImageEntry(
            image_id=image_id,
            path=Path(f"img_{image_id:04d}.{'ppm' if img.ndim == 3 else 'pgm'}"),
            width=img.shape[1],
            height=img.shape[0],
            site=site,
            drive=site,
            pose=0,
            rsm_count=rsm,
            eye=eye,
            image=RawImage(img),
            depth=np.asarray(depth, dtype=np.float32),
            mask=mask_from_classes(labels),
            class_map=labels,
            extra=extra,
        )
        ds.images.append(entry)
        out.class_maps[image_id] = labels
        return image_id

    for s in range(cfg.n_scenes):
        scene_cfg = SceneConfig(**{**asdict(cfg.scene), "seed": int(scene_seeds[s])})
        scene = generate_scene(scene_cfg)
        rsm = 10 * s + 100
        add(scene.image, scene.depth_map, scene.labels, Eye.LEFT, s, rsm)
        if cfg.stereo:
            _, right, truth = generate_stereo_pair(scene, cfg.focal_ratio)
            rid = add(right, truth["depth"], truth["labels"], Eye.RIGHT, s, rsm)
            out.stereo_truth[rid] = {"origin": truth["origin"], "side": truth["side"]}
        if s < n_rsm:
            shift = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
            delta = cfg.rsm_brightness * (1 if rng.random() < 0.5 else -1)
            _, img_b, truth = generate_rsm_pair(scene, shift, delta)
            bid = add(img_b, truth["depth"], truth["labels"], Eye.LEFT, s, rsm + 2)
            out.rsm_truth[bid] = {"shift": list(shift), "brightness_delta": delta}
    return out


def patch_truth(synth: SyntheticDataset, patches) -> np.ndarray:
    """Region class at each patch centre."""
    return np.array([synth.class_maps[p.image_id][p.center_row, p.center_col] for p in patches], dtype=np.int64)


def write_dataset(synth: SyntheticDataset, out_dir) -> Path:
    """Write images (PGM/PPM), depth (raw f32), masks and class maps plus ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for entry in synth.dataset.images:
        stem = f"img_{entry.image_id:04d}"
        img_name = stem + (".pgm" if entry.image.channels == 1 else ".ppm")
        write_pnm(out_dir / img_name, entry.image.pixels)
        write_depth(out_dir / f"{stem}_depth.f32", entry.depth)
        write_pnm(out_dir / f"{stem}_mask.pgm", entry.mask)
        write_pnm(out_dir / f"{stem}_classes.pgm", entry.class_map)
        rec = {
            "image_id": entry.image_id,
            "path": img_name,
            "width": entry.width,
            "height": entry.height,
            "site": entry.site,
            "drive": entry.drive,
            "pose": entry.pose,
            "rsm_count": entry.rsm_count,
            "eye": entry.eye.value,
            "depth": f"{stem}_depth.f32",
            "mask": f"{stem}_mask.pgm",
            "class_map": f"{stem}_classes.pgm",
        }
        if entry.image_id in synth.stereo_truth:
            rec["stereo_truth"] = synth.stereo_truth[entry.image_id]
        if entry.image_id in synth.rsm_truth:
            rec["rsm_truth"] = synth.rsm_truth[entry.image_id]
        records.append(rec)
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"images": records}, indent=2))
    return manifest
