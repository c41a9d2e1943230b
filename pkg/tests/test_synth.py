import numpy as np
import pytest

from terraclust.core import Eye, validate_dataset
from terraclust.ingest import ROCK, SOIL, extract_dataset, load_manifest, resize_area
from terraclust.synth import (
    DatasetConfig,
    SceneConfig,
    class_parameters,
    generate_dataset,
    generate_rsm_pair,
    generate_scene,
    generate_stereo_pair,
    patch_truth,
    write_dataset,
)

SMALL = SceneConfig(image_size=256, seed=11)


def test_scene_deterministic_per_seed():
    a, b = generate_scene(SMALL), generate_scene(SMALL)
    np.testing.assert_array_equal(a.image, b.image)
    c = generate_scene(SceneConfig(image_size=256, seed=12))
    assert not np.array_equal(a.image, c.image)


def test_noise_free_pixel_formula():
    cfg = SceneConfig(image_size=128, brightness_sigma=0.0, noise_sigma=0.0, seed=2)
    s = generate_scene(cfg)
    freqs, thetas = class_parameters(cfg)
    y, x = 37, 90
    c = s.labels[y, x]
    m = s.origin[0]
    # recover the region phase from two pixels of the same region, then check a third
    def value(phase, yy, xx):
        arg = 2 * np.pi * freqs[c] / 128 * (xx * np.cos(thetas[c]) + yy * np.sin(thetas[c])) + phase
        return 255 * (0.5 + 0.1 * np.sin(arg))

    canvas = s.canvas[m : m + 128, m : m + 128]
    phases = np.linspace(0, 2 * np.pi, 20001)
    err = np.abs(value(phases, y, x) - canvas[y, x]) + np.abs(value(phases, y, x + 1) - canvas[y, x + 1])
    phase = phases[np.argmin(err)]
    assert value(phase, y + 1, x) == pytest.approx(canvas[y + 1, x], abs=0.05)


def test_every_class_present_equally():
    s = generate_scene(SMALL)
    counts = np.bincount(s.labels.ravel(), minlength=8)
    assert (counts > 0).all()
    np.testing.assert_allclose(counts / counts.sum(), 1 / 8, atol=1e-12)


def test_mask_and_depth_layout():
    s = generate_scene(SMALL)
    np.testing.assert_array_equal(s.mask == ROCK, s.labels % 2 == 0)
    assert set(np.unique(s.mask)) <= {ROCK, SOIL}
    # depth increases down the frame inside a region
    assert s.depth_map[200, 10] > s.depth_map[140, 10] or s.labels[200, 10] != s.labels[140, 10]


def test_class_parameters_defaults():
    f, t = class_parameters(SceneConfig())
    np.testing.assert_allclose(f[[0, -1]], [4.0, 16.0])
    assert np.all(np.diff(f) > 0)
    np.testing.assert_allclose(t, np.arange(8) * np.pi / 8)


def test_rsm_pair_is_a_translation():
    s = generate_scene(SMALL)
    a, b, truth = generate_rsm_pair(s, (10, -7), brightness_delta=0)
    np.testing.assert_array_equal(b[10:, :-7], a[:-10, 7:])
    np.testing.assert_array_equal(truth["labels"][10:, :-7], s.labels[:-10, 7:])
    with pytest.raises(ValueError):
        generate_rsm_pair(s, (64, 0))


def test_rsm_brightness_offset():
    s = generate_scene(SMALL)
    a, b, _ = generate_rsm_pair(s, (0, 0), brightness_delta=20)
    inner = (a > 20) & (a < 215)
    np.testing.assert_array_equal(b[inner].astype(int) - a[inner], 20)


def test_stereo_pair_geometry():
    s = generate_scene(SceneConfig(image_size=300, seed=4))
    left, right, truth = generate_stereo_pair(s, 0.34)
    side = truth["side"]
    r0, c0 = truth["origin"]
    assert side == 102 and (r0, c0) == (99, 99)
    small = resize_area(right.astype(float), side, side)
    crop = left[r0 : r0 + side, c0 : c0 + side].astype(float)
    assert np.corrcoef(small.ravel(), crop.ravel())[0, 1] > 0.95
    assert truth["labels"].shape == right.shape


def test_dataset_layout_and_validation():
    syn = generate_dataset(DatasetConfig(n_scenes=3, scene=SceneConfig(image_size=256), rsm_fraction=0.5, seed=1))
    ds = syn.dataset
    eyes = [e.eye for e in ds.images]
    assert eyes.count(Eye.LEFT) == 3 + 2 and eyes.count(Eye.RIGHT) == 3
    assert len(syn.stereo_truth) == 3 and len(syn.rsm_truth) == 2
    for b, t in syn.rsm_truth.items():
        assert max(abs(v) for v in t["shift"]) <= 25
        assert abs(t["brightness_delta"]) == 20
    patches = extract_dataset(ds, (64, 128))
    assert validate_dataset(patches, image_sizes=ds.image_sizes()).ok
    truth = patch_truth(syn, patches)
    assert truth.shape == (len(patches),) and truth.max() < 8


def test_dataset_determinism():
    cfg = DatasetConfig(n_scenes=2, scene=SceneConfig(image_size=128), seed=5)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    for x, y in zip(a.dataset.images, b.dataset.images):
        np.testing.assert_array_equal(x.image.pixels, y.image.pixels)
    assert a.rsm_truth == b.rsm_truth


def test_write_and_reload(tmp_path):
    syn = generate_dataset(DatasetConfig(n_scenes=1, scene=SceneConfig(image_size=128), seed=5))
    manifest = write_dataset(syn, tmp_path)
    ds = load_manifest(manifest)
    assert len(ds.images) == len(syn.dataset.images)
    for x, y in zip(ds.images, syn.dataset.images):
        np.testing.assert_array_equal(x.image.pixels, y.image.pixels)
        np.testing.assert_array_equal(x.depth, y.depth)
        np.testing.assert_array_equal(x.class_map, y.class_map)
        assert (x.eye, x.rsm_count, x.site) == (y.eye, y.rsm_count, y.site)
    assert "stereo_truth" in ds.images[1].extra
