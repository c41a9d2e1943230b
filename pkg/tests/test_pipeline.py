import numpy as np
import pytest

from terraclust.cluster import satisfied_fraction
from terraclust.core import EmbeddingSet
from terraclust.metrics import db_index, nmi
from terraclust.pipeline import (
    ABLATION_VARIANTS,
    MetricConfig,
    PipelineConfig,
    PipelineError,
    emit_cluster_montage,
    evaluate,
    format_table,
    held_out_mask,
    run_ablation,
    run_dccml,
    standardize,
)
from terraclust.formats import read_pnm

FAST = PipelineConfig(k=6, max_rounds=4, n_init=2, pca_dim=6, metric=MetricConfig(out_dim=12, epochs_per_round=2))


def test_config_roundtrip_and_validation():
    cfg = FAST.replace(lam=0.5, constraint_sources=("LR",))
    d = cfg.to_dict()
    assert d["lambda"] == 0.5 and "lam" not in d
    assert PipelineConfig.from_dict(d) == cfg
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        PipelineConfig(k=1)
    with pytest.raises(ValueError):
        PipelineConfig(constraint_sources=("Sonar",))
    with pytest.raises(ValueError):
        PipelineConfig(metric=MetricConfig(margin=0))


def test_standardize(rng):
    X = rng.normal(3, 2, size=(50, 3))
    X[:, 2] = 1.0
    Z = standardize(X)
    np.testing.assert_allclose(Z[:, :2].mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(Z[:, :2].std(0), 1, atol=1e-12)
    assert not Z[:, 2].any()


def test_single_round_is_converged(small_problem):
    X, cons, _ = small_problem
    res = run_dccml(X, cons, FAST.replace(max_rounds=1))
    assert res.converged and len(res.history) == 1 and res.selected_round == 1
    assert res.history[0].triplet_loss is None


def test_history_consistent_and_hard_links_hold(small_problem):
    X, cons, _ = small_problem
    res = run_dccml(X, cons, FAST)
    hard, *_ = cons.to_index_arrays(np.arange(len(X)))
    for rec in res.history:
        assert rec.db_index == pytest.approx(db_index(rec.embedding, rec.assignments), rel=1e-12)
        assert satisfied_fraction(rec.assignments, hard) == 1.0
    for prev, rec in zip(res.history, res.history[1:]):
        assert rec.nmi_prev == pytest.approx(nmi(rec.assignments, prev.assignments))
    sel = res.history[res.selected_round - 1]
    np.testing.assert_array_equal(res.assignments, sel.assignments)
    if not res.converged:
        assert sel.db_index == min(r.db_index for r in res.history)
    assert res.embedding.values.shape == (len(X), 6)


def test_deterministic(small_problem):
    X, cons, _ = small_problem
    a = run_dccml(X, cons, FAST)
    b = run_dccml(X, cons, FAST)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    np.testing.assert_array_equal(a.metric_model.weights, b.metric_model.weights)


def test_constraint_sources_toggle(small_problem):
    X, cons, _ = small_problem
    res = run_dccml(X, cons, FAST.replace(constraint_sources=("LR",), max_rounds=1))
    counts = res.constraints.count_by_source()
    assert counts["LR"] > 0 and counts["RSM"] == 0 and counts["Neighbor"] == 0
    none = run_dccml(X, cons, FAST.replace(constraint_sources=(), max_rounds=1))
    free = run_dccml(X, None, FAST.replace(max_rounds=1))
    np.testing.assert_array_equal(none.assignments, free.assignments)


def test_embedding_set_input_keeps_ids(small_problem):
    X, cons, _ = small_problem
    ids = np.arange(len(X))
    res = run_dccml(EmbeddingSet(X, ids), cons, FAST.replace(max_rounds=1))
    np.testing.assert_array_equal(res.embedding.patch_ids, ids)


def test_failures_are_wrapped(rng):
    with pytest.raises(PipelineError):
        run_dccml(rng.normal(size=(5, 3)), None, FAST)  # metric wider than the input
    with pytest.raises(PipelineError):
        run_dccml(rng.normal(size=(5, 20)), None, FAST)  # too few points for the projection
    with pytest.raises(PipelineError):
        run_dccml(rng.normal(size=(20, 20)), None, FAST.replace(k=30))  # more clusters than points


def test_evaluate_keys(small_problem, small_patches):
    X, _, truth = small_problem
    labels = np.arange(len(X)) % 4
    groups = [(p.site, p.drive) for p in small_patches]
    m = evaluate(X, labels, truth, groups, query_mask=held_out_mask(small_patches))
    assert set(m) == {"db_index", "k", "n_patches", "nmi_vs_truth", "homogeneous_clusters", "precision_at_10_mean"}
    assert m["k"] == 4 and m["n_patches"] == len(X)
    assert evaluate(X, labels)["nmi_vs_truth"] is None


def test_ablation_rows(small_problem):
    X, cons, truth = small_problem
    cfg = FAST.replace(max_rounds=1)
    rows = run_ablation(X, cons, cfg, truth=truth)
    assert [r["variant"] for r in rows] == ["none", "Neighbor", "LR", "RSM", "Neighbor+LR", "Neighbor+LR+RSM"]
    assert all(r["error"] is None for r in rows)
    again = run_ablation(X, cons, cfg, variants=ABLATION_VARIANTS[:1], truth=truth)
    assert again[0]["db_index"] == rows[0]["db_index"]
    table = format_table(rows)
    assert table.splitlines()[0].split() == ["variant", "DB", "homog", "P@10"]


def test_ablation_records_failures(rng):
    rows = run_ablation(rng.normal(size=(20, 20)), None, FAST.replace(max_rounds=1, k=30), variants=((),))
    assert rows[0]["error"] and np.isnan(rows[0]["db_index"])
    assert "nan" in format_table(rows)


def test_montage_grid(tmp_path, small_synth, small_patches):
    assign = np.zeros(len(small_patches), dtype=int)
    assign[:4] = 1
    shape = emit_cluster_montage(small_synth.dataset, small_patches, assign, 1, tmp_path / "m.ppm", tile=16)
    assert shape == (2, 2)
    img = read_pnm(tmp_path / "m.ppm")
    assert img.shape == (32, 32, 3)
    assert emit_cluster_montage(small_synth.dataset, small_patches, assign, 0, tmp_path / "n.ppm", n_samples=10, tile=8) == (3, 4)
    with pytest.raises(ValueError):
        emit_cluster_montage(small_synth.dataset, small_patches, assign, 5, tmp_path / "e.ppm")
