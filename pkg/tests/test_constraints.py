import math

import numpy as np
import pytest
from conftest import make_patch
from oracles import footprint_pairs, ncc_brute, rsm_partners

from terraclust.constraints import (
    ConstraintConfig,
    DepthUnavailable,
    LRConfig,
    PreconditionError,
    RSMConfig,
    SimilarityConfig,
    depth_distance,
    find_lr_pairs,
    find_rsm_pairs,
    footprint_links,
    generate_constraints,
    generate_lr_constraints,
    generate_neighbor_constraints,
    generate_rsm_constraints,
    ncc_map,
    ncc_match,
    similarity_from_distances,
    soft_similarity,
    spatial_distance,
)
from terraclust.core import Eye, LinkSource
from terraclust.ingest import extract_patches, load_image


# -- similarity -------------------------------------------------------------------


def test_similarity_anchor_values():
    cfg = SimilarityConfig()
    assert similarity_from_distances(0.0, 0.0, cfg) == 1.0
    assert similarity_from_distances(2 * 512.0**2, 2 * 6.0**2, cfg) == pytest.approx(math.exp(-1), abs=1e-12)
    assert similarity_from_distances(0.0, None, cfg) == 1.0


def test_similarity_symmetric_and_monotone(rng):
    ds = rng.uniform(0, 2e6, 1000)
    dd = rng.uniform(0, 500, 1000)
    base = similarity_from_distances(ds, dd)
    assert np.all(similarity_from_distances(ds + rng.uniform(0, 1e5, 1000), dd) <= base)
    assert np.all(similarity_from_distances(ds, dd + rng.uniform(0, 50, 1000)) <= base)
    assert np.all((base > 0) & (base <= 1))


def test_soft_similarity_symmetric(rng):
    for _ in range(50):
        a = make_patch(0, *rng.integers(0, 1000, 2), depth_pixels=rng.normal(size=64))
        b = make_patch(1, *rng.integers(0, 1000, 2), depth_pixels=rng.normal(size=64))
        assert soft_similarity(a, b) == soft_similarity(b, a)


def test_distance_definitions():
    a = make_patch(0, 10, 10, depth_pixels=np.array([1.0, 2.0]))
    b = make_patch(1, 13, 14, depth_pixels=np.array([2.0, 4.0]))
    assert spatial_distance(a, b) == 25.0
    assert depth_distance(a, b) == 2.5
    with pytest.raises(ValueError):
        spatial_distance(a, make_patch(2, 0, 0, image_id=1))
    with pytest.raises(DepthUnavailable):
        depth_distance(a, make_patch(3, 0, 0))


def test_similarity_config_validation():
    with pytest.raises(ValueError):
        SimilarityConfig(sigma_spatial=0)
    with pytest.raises(ValueError):
        SimilarityConfig(alpha=0, beta=0)


def test_neighbor_links_match_brute_force(rng):
    cfg = SimilarityConfig(sigma_spatial=40.0, sigma_depth=2.0, threshold=0.7)
    patches = []
    for i in range(60):
        img = i % 2
        patches.append(make_patch(i, *rng.integers(0, 200, 2), image_id=img, depth_pixels=rng.normal(0, 2, 16)))
    links = generate_neighbor_constraints(patches, cfg)
    got = {(l.a, l.b): l.confidence for l in links}
    expected = {}
    for i, p in enumerate(patches):
        for q in patches[i + 1 :]:
            if p.image_id == q.image_id:
                s = soft_similarity(p, q, cfg)
                if s >= cfg.threshold:
                    expected[(p.patch_id, q.patch_id)] = s
    assert got.keys() == expected.keys()
    for key, s in expected.items():
        assert got[key] == pytest.approx(s, abs=1e-12)
    assert all(l.source == LinkSource.NEIGHBOR for l in links)


# -- NCC ----------------------------------------------------------------------------


def test_ncc_map_matches_brute_force(rng):
    for _ in range(5):
        S = rng.uniform(0, 255, (20, 23))
        T = rng.uniform(0, 255, (5, 7))
        np.testing.assert_allclose(ncc_map(T, S), ncc_brute(T, S), atol=1e-9)


def test_ncc_brightness_and_contrast_invariance(rng):
    S = rng.uniform(0, 200, (30, 30))
    T = S[8:16, 11:21].copy()
    r, c, score = ncc_match(T * 1.3 + 25, S)
    assert (r, c) == (8, 11)
    assert score == pytest.approx(1.0, abs=1e-9)


def test_ncc_flat_inputs_score_zero():
    S = np.zeros((10, 10))
    S[:, 5:] = 1.0
    assert not ncc_map(np.full((3, 3), 7.0), S).any()
    m = ncc_map(np.array([[0.0, 1.0], [0.0, 1.0]]), S)
    assert m[0, 0] == 0.0  # flat scene window
    assert m[0, 4] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ncc_map(np.ones((11, 2)), S)


def test_ncc_match_with_scale(rng):
    S = rng.uniform(0, 255, (60, 60))
    S = np.kron(S[:30, :30], np.ones((2, 2)))  # piecewise constant, exact under 2x area downscale
    big = np.kron(S[10:30, 20:40], np.ones((2, 2)))
    r, c, score = ncc_match(big, S, scale=0.5)
    assert (r, c) == (10, 20)
    assert score == pytest.approx(1.0)


# -- stereo ------------------------------------------------------------------------


def _stereo_entries(small_synth):
    left = small_synth.dataset.images[0]
    right = small_synth.dataset.images[1]
    assert (left.eye, right.eye) == (Eye.LEFT, Eye.RIGHT)
    return left, right


def test_lr_origin_and_links_match_geometry(small_synth):
    left, right = _stereo_entries(small_synth)
    lp = extract_patches(load_image(left), 128, image_id=left.image_id)
    rp = extract_patches(load_image(right), 256, image_id=right.image_id, start_id=len(lp))
    res = generate_lr_constraints(left, lp, right, rp)
    truth = small_synth.stereo_truth[right.image_id]
    assert not res.skipped
    assert abs(res.origin[0] - truth["origin"][0]) <= 2 and abs(res.origin[1] - truth["origin"][1]) <= 2
    expected = footprint_pairs(rp, lp, truth["origin"], truth["side"], right.width)
    assert {(h.a, h.b) for h in res.links} == expected
    assert expected


def test_lr_preconditions(small_synth):
    left, right = _stereo_entries(small_synth)
    with pytest.raises(PreconditionError):
        generate_lr_constraints(right, [], left, [])
    other = small_synth.dataset.images[3]
    with pytest.raises(PreconditionError):
        generate_lr_constraints(other, [], right, [])


def test_lr_skips_on_low_score(small_synth, rng):
    left, right = _stereo_entries(small_synth)
    res = generate_lr_constraints(left, [], right, [], LRConfig(min_score=1.01))
    assert res.skipped and res.links == []


def test_footprint_links_coverage_threshold():
    left = [make_patch(0, 4, 4), make_patch(1, 4, 12)]
    right = [make_patch(10, 4, 4)]
    # footprint of 8x8 right window at scale 1 starting at column 5 covers 7/8 of window 0
    links = footprint_links(right, left, (0, 1), (1.0, 1.0))
    assert [(h.a, h.b) for h in links] == [(0, 10)]
    # starting at column 4.5: equal split between windows 0 and 1? no, 7.5/8 still on window 0 side
    links = footprint_links(right, left, (0, 8), (1.0, 1.0))
    assert [(h.a, h.b) for h in links] == [(1, 10)]
    assert footprint_links(right, left, (0, 30), (1.0, 1.0)) == []
    assert footprint_links(right, left, (0, 1), (1.0, 1.0), LRConfig(min_overlap=0.9)) == []


# -- RSM ---------------------------------------------------------------------------


def test_rsm_recovers_shifted_windows(small_synth):
    a = small_synth.dataset.images[0]
    b = small_synth.dataset.images[2]
    shift = small_synth.rsm_truth[b.image_id]["shift"]
    pa = extract_patches(load_image(a), 64, image_id=a.image_id)
    pb = extract_patches(load_image(b), 64, image_id=b.image_id, start_id=len(pa))
    links = generate_rsm_constraints(a, pa, b, pb, RSMConfig(search_fraction=0.125))
    truth = rsm_partners(pa, pb, shift, b.height, b.width)
    got = {}
    for h in links:
        assert h.source == LinkSource.RSM
        got[h.a] = h.b
    false = [k for k, v in got.items() if truth.get(k) != v]
    assert false == []
    assert len(set(got) & set(truth)) >= 0.95 * len(truth)


def test_rsm_preconditions(small_synth):
    a, b = small_synth.dataset.images[0], small_synth.dataset.images[2]
    with pytest.raises(PreconditionError):
        generate_rsm_constraints(a, [], b, [], RSMConfig(rsm_gap=3))
    with pytest.raises(PreconditionError):
        generate_rsm_constraints(a, [], small_synth.dataset.images[3], [])


def test_pair_discovery(small_synth):
    ds = small_synth.dataset
    lr = [(l.image_id, r.image_id) for l, r in find_lr_pairs(ds)]
    rsm = [(x.image_id, y.image_id) for x, y in find_rsm_pairs(ds)]
    assert lr == [(0, 1), (3, 4)]
    assert rsm == [(0, 2), (3, 5)]


def test_generate_constraints_respects_sources(small_synth, small_patches):
    ds = small_synth.dataset
    only_lr = generate_constraints(ds, small_patches, ConstraintConfig(sources=("LR",))).constraints
    counts = only_lr.count_by_source()
    assert counts["LR"] > 0 and counts["RSM"] == 0 and counts["Neighbor"] == 0
    none = generate_constraints(ds, small_patches, ConstraintConfig(sources=())).constraints
    assert none.count_by_source() == {"LR": 0, "RSM": 0, "Neighbor": 0}
