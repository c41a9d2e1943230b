import numpy as np
import pytest
from conftest import make_patch
from oracles import precision_brute
from sklearn.metrics import davies_bouldin_score, normalized_mutual_info_score

from terraclust.core import Split
from terraclust.metrics import db_index, homogeneity_report, nmi, precision_at_k, split_train_test


def test_db_hand_example():
    X = np.array([[0.0], [2.0], [10.0], [12.0]])
    assert db_index(X, [0, 0, 1, 1]) == pytest.approx(0.2, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_db_matches_reference(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(120, 4))
    labels = rng.integers(0, 6, 120)
    assert db_index(X, labels) == pytest.approx(davies_bouldin_score(X, labels), rel=1e-12)


def test_db_invariances(rng):
    X = rng.normal(size=(80, 3))
    labels = rng.integers(0, 4, 80)
    base = db_index(X, labels)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    assert db_index(X @ Q.T + 7.0, labels) == pytest.approx(base, rel=1e-10)
    assert db_index(3.5 * X, labels) == pytest.approx(base, rel=1e-10)
    relabel = np.array([3, 0, 2, 1])[labels]
    assert db_index(X, relabel) == pytest.approx(base, rel=1e-12)


def test_db_degenerate_cases():
    with pytest.raises(ValueError):
        db_index(np.zeros((3, 2)), [0, 0, 0])
    X = np.array([[0.0], [2.0], [0.0], [2.0]])
    assert db_index(X, [0, 0, 1, 1]) == np.inf


def test_nmi_examples():
    assert nmi([0, 0, 1, 1, 2], [5, 5, 7, 7, 9]) == 1.0
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)
    assert nmi([0, 0, 0], [1, 1, 1]) == 1.0
    with pytest.raises(ValueError):
        nmi([0, 1], [0])


@pytest.mark.parametrize("seed", range(5))
def test_nmi_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 5, 300), rng.integers(0, 3, 300)
    b[:100] = a[:100] % 3
    assert nmi(a, b) == pytest.approx(normalized_mutual_info_score(a, b), abs=1e-12)
    assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-15)


def test_precision_matches_exhaustive_scan(rng):
    X = rng.integers(0, 4, size=(200, 2)).astype(float)  # many distance ties
    labels = rng.integers(0, 3, 200)
    groups = [(int(g), 0) for g in rng.integers(0, 5, 200)]
    res = precision_at_k(X, labels, groups, k=10)
    np.testing.assert_allclose(res.precision, precision_brute(X, labels, groups, 10), atol=1e-12)


def test_precision_excludes_same_group_and_flags_short():
    X = np.array([[0.0], [0.1], [5.0], [5.1]])
    labels = [0, 0, 1, 1]
    groups = [(0, 0), (0, 0), (1, 1), (1, 1)]
    res = precision_at_k(X, labels, groups, k=1)
    assert res.precision.tolist() == [0.0, 0.0, 0.0, 0.0]
    assert res.retrieved[0].tolist() == [2]
    short = precision_at_k(X, labels, groups, k=5)
    assert short.short.all()


def test_split_boundary():
    ps = [make_patch(0, 4, 4, size=8), make_patch(1, 4, 60, size=8), make_patch(2, 4, 56, size=8), make_patch(3, 4, 64, size=8)]
    out = split_train_test(ps, {0: 100})
    assert [p.split for p in out] == [Split.TRAIN, Split.EXCLUDED, Split.TRAIN, Split.TEST]


def test_homogeneity_threshold_is_strict():
    truth = [0] * 8 + [1] * 2 + [0] * 9 + [1]
    assign = [0] * 10 + [1] * 10
    count, fractions = homogeneity_report(assign, truth)
    assert fractions == {0: 0.8, 1: 0.9}
    assert count == 1
