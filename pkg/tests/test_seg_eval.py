from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from geco.features import FeatureMap
from geco.seg_eval import (
    PartCentroids,
    SegError,
    centroid_assign,
    centroid_fit,
    confusion_matrix,
    confusion_normalize,
    geometric_subset_metrics,
    seg_metrics,
)


def brute_force_assign(values, part_ids, centroids):
    out = []
    for x in values:
        best, best_d = None, None
        for p, c in zip(part_ids, centroids):
            d = sum((float(xi) - float(ci)) ** 2 for xi, ci in zip(x, c))
            if best_d is None or d < best_d:
                best, best_d = p, d
        out.append(best)
    return out


def sorted_median(column):
    s = sorted(column)
    n = len(s)
    return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2


def test_centroid_fit_examples():
    c = centroid_fit(np.array([[1.0, 2.0], [3.0, 4.0]]), [0, 1])
    np.testing.assert_array_equal(c.centroids, [[1.0, 2.0], [3.0, 4.0]])
    c = centroid_fit(np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 0.0]]), [5, 5, 5])
    np.testing.assert_array_equal(c.centroids, [[2.0, 0.0]])
    c = centroid_fit(np.array([[1.0], [3.0]]), [0, 0])
    assert c.centroids[0, 0] == 2.0
    with pytest.raises(SegError, match="part 4"):
        centroid_fit(np.array([[1.0]]), [0], part_ids=[0, 4])


def test_centroid_fit_ignores_unlabeled():
    c = centroid_fit(np.array([[1.0], [100.0]]), [0, -1])
    assert c.part_ids == (0,) and c.centroids[0, 0] == 1.0


def test_centroid_fit_matches_sort_oracle(rng):
    values = rng.normal(size=(40, 3))
    labels = rng.integers(0, 4, size=40)
    c = centroid_fit(values, labels)
    for k, part in enumerate(c.part_ids):
        members = values[labels == part]
        for dim in range(3):
            assert c.centroids[k, dim] == sorted_median(list(members[:, dim]))


def test_assign_examples():
    cents = PartCentroids((0, 2, 5), np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]))
    f = FeatureMap(1, 2, 2, np.array([[1.0, 0.0], [5.0, 5.0]]))
    assert list(centroid_assign(f, cents)) == [2, 2]
    tie = PartCentroids((2, 5), np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert list(centroid_assign(np.array([[0.0, 3.0]]), tie)) == [2]
    with pytest.raises(SegError):
        centroid_assign(np.zeros((1, 3)), tie)


def test_assign_matches_brute_force(rng):
    for _ in range(100):
        n_parts = int(rng.integers(2, 6))
        ids = tuple(sorted(rng.choice(20, size=n_parts, replace=False).tolist()))
        cents = PartCentroids(ids, rng.integers(-3, 4, size=(n_parts, 3)).astype(float))
        values = rng.integers(-3, 4, size=(30, 3)).astype(float)
        assert list(centroid_assign(values, cents)) == brute_force_assign(values, ids, cents.centroids)


def test_partcentroids_validation():
    with pytest.raises(SegError):
        PartCentroids((1, 0), np.zeros((2, 2)))
    with pytest.raises(SegError):
        PartCentroids((0, 1), np.array([[0.0], [np.nan]]))


def test_metric_examples():
    m = seg_metrics(np.diag([3, 4, 5]))
    assert m["miou"] == 1.0 and m["acc"] == 1.0
    m = seg_metrics([[1, 1], [0, 2]])
    assert Fraction(m["acc"]).limit_denominator(100) == Fraction(3, 4)
    assert m["iou"] == [0.5, pytest.approx(2 / 3)]
    assert Fraction(m["miou"]).limit_denominator(100) == Fraction(7, 12)
    assert seg_metrics([[0, 3], [2, 0]])["acc"] == 0.0
    with pytest.raises(SegError):
        seg_metrics(np.zeros((2, 2)))


def test_absent_part_excluded_from_miou():
    m = seg_metrics([[2, 0, 0], [0, 0, 0], [0, 0, 1]])
    assert m["miou"] == 1.0 and m["iou"][1] is None


def test_confusion_matrix_counts():
    conf = confusion_matrix([0, 0, 5, 5, -1], [0, 5, 5, 5, 0], [0, 5])
    np.testing.assert_array_equal(conf, [[1, 1], [0, 2]])


def test_normalize_examples():
    out, flags = confusion_normalize(np.eye(4) * 7)
    np.testing.assert_allclose(np.diag(out), 0.25)
    assert flags == []
    # a ground-truth part split evenly between two predictions
    out, _ = confusion_normalize(np.array([[2, 2], [0, 0]]), 2)
    np.testing.assert_allclose(out[:, 0], [0.25, 0.25])
    out, flags = confusion_normalize(np.array([[3, 1, 0], [0, 0, 0], [1, 0, 4]]))
    assert flags == [1]
    np.testing.assert_array_equal(out[:, 1], 0)


def test_normalize_orientation():
    # rows of the raw matrix are ground truth; the display puts ground truth in columns
    out, _ = confusion_normalize(np.array([[3, 1], [0, 4]]))
    np.testing.assert_allclose(out, [[0.375, 0.0], [0.125, 0.5]])
    np.testing.assert_allclose(out.sum(axis=0), 0.5)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.int64, st.integers(1, 6).map(lambda n: (n, n)), elements=st.integers(0, 50)))
def test_metric_properties(conf):
    if conf.sum() == 0:
        return
    m = seg_metrics(conf)
    assert 0 <= m["miou"] <= 1 and 0 <= m["acc"] <= 1
    diagonal = np.count_nonzero(conf - np.diag(np.diag(conf))) == 0
    assert (m["miou"] == 1 and m["acc"] == 1) == diagonal
    out, flags = confusion_normalize(conf)
    assert abs(out.sum() - (conf.shape[0] - len(flags)) / conf.shape[0]) < 1e-12
    perm = np.random.default_rng(int(conf.sum())).permutation(conf.shape[0])
    m2 = seg_metrics(conf[np.ix_(perm, perm)])
    assert m2["acc"] == pytest.approx(m["acc"]) and m2["miou"] == pytest.approx(m["miou"])
    assert m2["iou"] == [m["iou"][k] if m["iou"][k] is None else pytest.approx(m["iou"][k]) for k in perm]


def test_geometric_subset():
    part_ids = [0, 1, 2, 3]
    symmetric = {0: None, 1: None, 2: 3, 3: 2}
    conf = np.array([[5, 3, 0, 0], [2, 1, 0, 0], [0, 0, 4, 0], [0, 0, 0, 6]])
    geo = geometric_subset_metrics(conf, part_ids, symmetric)
    assert geo["miou"] == 1.0 and geo["acc"] == 1.0 and geo["parts"] == [2, 3]
    swapped = np.array([[5, 0, 0, 0], [0, 5, 0, 0], [0, 0, 0, 4], [0, 0, 6, 0]])
    assert geometric_subset_metrics(swapped, part_ids, symmetric)["acc"] == 0.0
    with pytest.raises(SegError):
        geometric_subset_metrics(conf, part_ids, {p: None for p in part_ids})
