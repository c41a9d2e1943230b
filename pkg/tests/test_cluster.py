import numpy as np
import pytest
from oracles import best_partition, pcc_objective
from sklearn.cluster import KMeans

from terraclust.cluster import (
    InfeasibleError,
    PCCKMeans,
    UnionFind,
    assign_holdout,
    build_chunklets,
    partition_objective,
    pcc_kmeans,
    pcc_kmeans_arrays,
    satisfied_fraction,
)
from terraclust.core import ConstraintSet, EmbeddingSet, HardLink, LinkSource, SoftLink


def test_union_find_and_chunklets():
    uf = UnionFind(5)
    assert uf.union(0, 1) and uf.union(1, 2)
    assert not uf.union(0, 2)
    assert uf.find(2) == uf.find(0) != uf.find(3)
    chunk_of, members = build_chunklets(6, [(0, 3), (3, 5)])
    assert len(members) == 4
    assert chunk_of[0] == chunk_of[3] == chunk_of[5]
    assert sorted(map(len, members)) == [1, 1, 1, 3]


def test_partition_objective_matches_oracle(rng):
    X = rng.normal(size=(12, 3))
    labels = rng.integers(0, 3, 12)
    soft = [(0, 1), (2, 5)]
    cannot = [(3, 4)]
    got = partition_objective(X, labels, 0.7, soft, [0.8, 0.9], cannot, [0.5])
    want = pcc_objective(X, labels, 0.7, soft, [0.8, 0.9], cannot, [0.5])
    assert got == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_small_instances_reach_exhaustive_optimum_and_monotone(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 9))
    X = rng.normal(size=(n, 2))
    soft = [tuple(rng.choice(n, 2, replace=False)) for _ in range(3)]
    sw = rng.uniform(0.7, 1.0, 3)
    model, _ = pcc_kmeans_arrays(X, 2, soft=soft, soft_weights=sw, lam=0.5, n_init=10, random_state=seed)
    opt, _ = best_partition(X, 2, lam=0.5, soft=soft, soft_w=sw)
    assert model.objective >= opt - 1e-9
    assert model.objective == pytest.approx(opt, abs=1e-9)
    h = np.array(model.objective_history)
    assert np.all(np.diff(h) <= 1e-12)
    recomputed = partition_objective(X, model.assignments, 0.5, soft, sw)
    assert model.objective == pytest.approx(recomputed, abs=1e-9)


def test_hard_links_always_satisfied(rng):
    X = rng.normal(size=(200, 4))
    hard = [tuple(rng.choice(200, 2, replace=False)) for _ in range(60)]
    model, _ = pcc_kmeans_arrays(X, 8, hard=hard, lam=1.0, n_init=3, random_state=1)
    assert satisfied_fraction(model.assignments, hard) == 1.0
    assert len(np.unique(model.assignments)) == 8


def test_unconstrained_equals_lloyd_from_same_seeding():
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        X = np.concatenate([rng.normal(c, 1.0, size=(40, 3)) for c in (0, 4, 8)])
        est = PCCKMeans(n_clusters=3, lam=0.0, n_init=1, random_state=seed).fit(X)
        ref = KMeans(3, init=est.init_centroids_, n_init=1, tol=0, algorithm="lloyd").fit(X)
        np.testing.assert_array_equal(est.labels_, ref.labels_)


def test_soft_links_pull_points_together():
    X = np.array([[0.0], [0.1], [1.0], [1.1]])
    free = pcc_kmeans(X, 2, lam=0.0, random_state=0)
    assert free.assignments[1] != free.assignments[2]
    cs = ConstraintSet.build(soft=[SoftLink(1, 2, 1.0)])
    # a single soft link costs 1.0 when cut; cutting elsewhere costs less than that
    tied = pcc_kmeans(X, 2, cs, lam=1.0, random_state=0)
    assert tied.assignments[1] == tied.assignments[2]


def test_cannot_links_push_points_apart():
    X = np.array([[0.0], [0.05], [5.0], [5.05]])
    cs = ConstraintSet.build(cannot=[SoftLink(0, 1, 1.0), SoftLink(2, 3, 1.0)])
    m = pcc_kmeans(X, 2, cs, lam=100.0, random_state=0)
    assert m.assignments[0] != m.assignments[1]
    assert m.assignments[2] != m.assignments[3]


def test_embedding_set_uses_patch_ids(rng):
    X = rng.normal(size=(30, 2))
    ids = np.arange(30) * 10 + 7
    cs = ConstraintSet.build([HardLink(7, 297, LinkSource.LR)])
    m = pcc_kmeans(EmbeddingSet(X, ids), 5, cs, random_state=0)
    assert m.assignments[0] == m.assignments[29]


def test_infeasible_when_too_few_chunklets():
    X = np.arange(4, dtype=float)[:, None]
    with pytest.raises(InfeasibleError):
        pcc_kmeans_arrays(X, 3, hard=[(0, 1), (2, 3)])
    with pytest.raises(ValueError):
        pcc_kmeans_arrays(X, 1)


def test_empty_clusters_reseeded(rng):
    X = np.concatenate([np.zeros((20, 2)), np.ones((2, 2)) * 10])
    init = np.array([[0.0, 0.0], [100.0, 100.0], [-100.0, -100.0]])
    model, _ = pcc_kmeans_arrays(X + rng.normal(0, 1e-3, X.shape), 3, init=init, n_init=1, random_state=0)
    assert len(np.unique(model.assignments)) == 3


def test_deterministic_given_seed(rng):
    X = rng.normal(size=(100, 3))
    a = PCCKMeans(6, random_state=4).fit(X)
    b = PCCKMeans(6, random_state=4).fit(X)
    np.testing.assert_array_equal(a.labels_, b.labels_)
    np.testing.assert_array_equal(a.cluster_centers_, b.cluster_centers_)


def test_assign_holdout_and_predict(rng):
    C = np.array([[0.0, 0.0], [10.0, 0.0]])
    X = np.array([[1.0, 0.0], [9.0, 1.0], [5.0, 0.0]])
    assert assign_holdout(X, C).tolist() == [0, 1, 0]
    with pytest.raises(ValueError):
        assign_holdout(X, np.zeros((2, 3)))
    est = PCCKMeans(2, random_state=0).fit(rng.normal(size=(20, 2)))
    assert est.predict(rng.normal(size=(5, 2))).shape == (5,)
