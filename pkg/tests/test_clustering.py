import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoevents.clustering import (CFEntry, CFTree, DimensionError, adaptive_threshold,
                                  birch_cluster, cf_merge, default_step, stop_reason)
from geoevents.embedding import TweetVector


def vecs(points):
    return [TweetVector(f"t{i}", np.asarray(p, float), 1) for i, p in enumerate(points)]


def blobs(sizes, centres, sigma, seed):
    rng = np.random.default_rng(seed)
    pts, lab = [], []
    for k, (n, c) in enumerate(zip(sizes, centres)):
        pts.append(rng.normal(c, sigma, (n, len(c))))
        lab += [k] * n
    return np.concatenate(pts), np.array(lab)


class TestCFEntry:
    def test_merge_duplicate_point(self):
        v = np.array([1.0, -2.0, 0.5])
        e = CFEntry.from_point(v)
        m = cf_merge(e, e)
        assert m.n == 2
        np.testing.assert_array_equal(m.ls, 2 * v)
        assert m.ss == pytest.approx(2 * v @ v)
        assert m.radius == pytest.approx(0.0, abs=1e-7)

    def test_merge_two_singletons(self):
        m = cf_merge(CFEntry.from_point([0.0, 0.0]), CFEntry.from_point([2.0, 0.0]))
        assert m.n == 2
        np.testing.assert_allclose(m.centroid, [1.0, 0.0])
        assert m.radius == pytest.approx(1.0)

    def test_empty_entry_rejected(self):
        with pytest.raises(ValueError):
            cf_merge(CFEntry(0, np.zeros(2), 0.0), CFEntry.from_point([1.0, 1.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            cf_merge(CFEntry.from_point([1.0]), CFEntry.from_point([1.0, 2.0]))


@settings(max_examples=50)
@given(st.lists(st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=1,
                max_size=40), st.integers(1, 39))
def test_cf_additivity(points, cut):
    X = np.array(points)
    cut = min(cut, len(X) - 1) if len(X) > 1 else 0
    parts = [X[:cut], X[cut:]] if cut else [X]
    e = CFEntry.from_points(parts[0])
    for p in parts[1:]:
        e = cf_merge(e, CFEntry.from_points(p))
    c = X.mean(axis=0)
    r2 = np.mean(np.sum((X - c) ** 2, axis=1))
    assert e.n == len(X)
    np.testing.assert_allclose(e.centroid, c, rtol=1e-9, atol=1e-9)
    assert e.radius_sq >= -1e-9 * max(1.0, e.ss / e.n)
    assert e.radius_sq == pytest.approx(r2, rel=1e-9, abs=1e-9 * max(1.0, e.ss / e.n))


class TestBirch:
    def test_identical_vectors_one_cluster(self):
        a = birch_cluster(vecs([[1.0, 2.0]] * 30), 0.1)
        assert a.n_clusters == 1 and a.entries[0].radius == pytest.approx(0, abs=1e-6)

    def test_two_separated_blobs(self):
        X, lab = blobs([80, 70], [[0.0, 0.0], [10.0, 0.0]], 0.1, 0)
        a = birch_cluster(vecs(X), 1.0)
        assert a.n_clusters == 2
        # nearest-centroid oracle
        got = np.array([a.labels[f"t{i}"] for i in range(len(X))])
        assert len(set(zip(got, lab))) == 2

    def test_threshold_above_diameter(self):
        X, _ = blobs([50, 50], [[0.0, 0.0], [3.0, 3.0]], 0.5, 1)
        assert birch_cluster(vecs(X), 100.0).n_clusters == 1

    def test_every_vector_labelled_once(self):
        X, _ = blobs([200, 150, 100], [[0, 0, 0], [4, 0, 0], [0, 4, 0]], 1.0, 2)
        a = birch_cluster(vecs(X), 0.6)
        ids = [i for m in a.members for i in m]
        assert sorted(ids) == sorted(f"t{i}" for i in range(len(X)))
        assert sum(a.sizes()) == len(X)

    def test_radii_within_threshold(self):
        X, _ = blobs([300], [[0.0, 0.0]], 1.0, 3)
        a = birch_cluster(vecs(X), 0.5)
        assert max(e.radius for e in a.entries) <= 0.5 + 1e-9

    def test_entries_match_members(self):
        X, _ = blobs([300, 300], [[0.0] * 4, [2.0] * 4], 1.0, 4)
        a = birch_cluster(vecs(X), 1.0, branching=5, leaf_capacity=5)
        for e, m in zip(a.entries, a.members):
            pts = X[[int(i[1:]) for i in m]]
            d = CFEntry.from_points(pts)
            assert e.n == d.n
            np.testing.assert_allclose(e.ls, d.ls, rtol=1e-9)
            assert e.ss == pytest.approx(d.ss, rel=1e-9)

    def test_small_tree_splits_keep_all_points(self):
        X, _ = blobs([400], [[0.0, 0.0]], 5.0, 5)
        tree = CFTree(0.2, branching=3, leaf_capacity=3)
        for i, x in enumerate(X):
            tree.insert(x, i)
        assert sorted(m for e in tree.clusters() for m in e.members) == list(range(400))
        assert tree.root.cf.n == 400

    def test_mixed_dimensions(self):
        with pytest.raises(DimensionError):
            birch_cluster([TweetVector("a", np.zeros(2), 1), TweetVector("b", np.zeros(3), 1)], 1)

    def test_cluster_count_falls_with_threshold(self):
        X, _ = blobs([100, 100, 100], [[0, 0], [3, 0], [0, 3]], 0.7, 6)
        counts = [birch_cluster(vecs(X), t).n_clusters for t in np.linspace(0.05, 3.0, 25)]
        assert all(b <= a for a, b in zip(counts, counts[1:]))


class TestAdaptiveThreshold:
    def test_stop_parameters(self):
        from geoevents import clustering
        assert (clustering.SMALL_FRACTION_LIMIT, clustering.SMALL_CLUSTER_SIZE,
                clustering.LARGEST_FRACTION_LIMIT) == (0.05, 10, 0.5)

    def test_tight_blob_stops_when_everything_joins(self):
        X, _ = blobs([100], [[0.0, 0.0]], 0.01, 0)
        step = 0.005
        res = adaptive_threshold(vecs(X), step=step)
        # simulate the loop by hand
        k = 1
        while True:
            a = birch_cluster(vecs(X), step * k)
            if stop_reason(a, 100):
                break
            k += 1
        assert res.steps == k and res.converged
        assert res.threshold == pytest.approx(step * k)

    def test_clusters_of_ten_stop_on_first_step(self):
        centres = [[10.0 * i, 0.0] for i in range(10)]
        X, _ = blobs([10] * 10, centres, 0.001, 1)
        res = adaptive_threshold(vecs(X), step=0.5)
        assert res.steps == 1 and res.stop_reason == "small-clusters"
        assert res.assignment.n_clusters == 10

    def test_largest_cluster_rule(self):
        X, _ = blobs([60, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1], [[0, 0]] + [[50.0 * i, 9] for i in
                                                                  range(1, 11)], 0.001, 2)
        res = adaptive_threshold(vecs(X), step=1.0)
        assert res.steps == 1 and res.stop_reason == "largest-cluster"

    def test_cap_returns_failure_with_last_assignment(self):
        X = np.arange(40, dtype=float)[:, None] * 100.0
        res = adaptive_threshold(vecs(X), step=1e-3, cap=5)
        assert not res.converged and res.stop_reason == "cap" and res.steps == 5
        assert res.assignment.n_clusters == 40

    def test_default_step_is_five_percent_of_median(self):
        X = np.array([[0.0], [1.0], [3.0]])
        assert default_step(vecs(X)) == pytest.approx(0.05 * 2.0)

    def test_default_step_is_seeded(self):
        X, _ = blobs([500], [[0.0] * 5], 1.0, 3)
        assert default_step(vecs(X), seed=1) == default_step(vecs(X), seed=1)

    def test_invalid(self):
        with pytest.raises(ValueError):
            adaptive_threshold([])
        with pytest.raises(ValueError):
            adaptive_threshold(vecs([[0.0]]), step=0.0)
