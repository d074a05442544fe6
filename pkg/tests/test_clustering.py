import numpy as np
import pytest
from sklearn.cluster import HDBSCAN as SkHDBSCAN
from sklearn.metrics import adjusted_rand_score

from lungseg.clustering import hdbscan_cluster


def canon(labels):
    """Relabel clusters by first occurrence so partitions compare directly."""
    mapping, out = {}, []
    for l in labels:
        if l == -1:
            out.append(-1)
            continue
        if l not in mapping:
            mapping[l] = len(mapping)
        out.append(mapping[l])
    return out


FIXTURE_1D = np.array([[0.0], [0.1], [0.2], [10.0], [10.1], [10.2]])


class TestFixtures:
    def test_two_cluster_fixture(self):
        got = hdbscan_cluster(FIXTURE_1D, min_cluster_size=3, min_samples=2)
        assert canon(got.labels) == [0, 0, 0, 1, 1, 1]
        assert got.n_clusters == 2

    def test_two_cluster_fixture_matches_reference(self):
        ref = SkHDBSCAN(min_cluster_size=3, min_samples=2).fit(FIXTURE_1D)
        got = hdbscan_cluster(FIXTURE_1D, min_cluster_size=3, min_samples=2)
        assert canon(got.labels) == canon(ref.labels_)

    def test_isolated_point_fixture_matches_reference(self):
        x = np.vstack([FIXTURE_1D, [[5.0]]])
        ref = SkHDBSCAN(min_cluster_size=3, min_samples=2).fit(x)
        got = hdbscan_cluster(x, min_cluster_size=3, min_samples=2)
        assert canon(got.labels) == canon(ref.labels_)
        # the two tight groups stay intact either way
        assert canon(got.labels)[:6] == [0, 0, 0, 1, 1, 1]

    def test_all_identical_points_single_cluster(self):
        got = hdbscan_cluster(np.zeros((7, 3)), min_cluster_size=2, min_samples=1)
        assert list(got.labels) == [0] * 7

    def test_single_point(self):
        got = hdbscan_cluster(np.array([[1.0, 2.0]]), min_cluster_size=2, min_samples=1)
        assert list(got.labels) == [0]


class TestValidation:
    def test_min_cluster_size_floor(self):
        with pytest.raises(ValueError):
            hdbscan_cluster(FIXTURE_1D, min_cluster_size=1, min_samples=1)

    def test_min_samples_range(self):
        with pytest.raises(ValueError):
            hdbscan_cluster(FIXTURE_1D, min_cluster_size=2, min_samples=0)
        with pytest.raises(ValueError):
            hdbscan_cluster(FIXTURE_1D, min_cluster_size=2, min_samples=7)


def _blobs(seed, k=3, n=40, std=0.3, spread=10.0, min_sep=5.0):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-spread, spread, (k, 2))
    while min(
        np.linalg.norm(a - b) for i, a in enumerate(centers) for b in centers[i + 1 :]
    ) < min_sep:
        centers = rng.uniform(-spread, spread, (k, 2))
    pts = np.vstack([rng.normal(c, std, (n, 2)) for c in centers])
    gt = np.repeat(np.arange(k), n)
    return pts, gt


class TestAgainstReference:
    def test_structured_datasets_match_sklearn_exactly(self):
        rng = np.random.default_rng(42)
        for trial in range(10):
            pts, _ = _blobs(seed=100 + trial, k=int(rng.integers(2, 5)))
            mcs = int(rng.integers(4, 8))
            ms = int(rng.integers(2, 5))
            mine = canon(hdbscan_cluster(pts, mcs, ms).labels)
            ref = canon(SkHDBSCAN(min_cluster_size=mcs, min_samples=ms).fit(pts).labels_)
            assert mine == ref, f"trial {trial} (mcs={mcs}, ms={ms}) diverged"

    def test_three_blob_ari(self):
        rng = np.random.default_rng(0)
        pts = np.vstack([rng.normal(c, 0.1, (50, 2)) for c in [(0, 0), (3, 0), (0, 3)]])
        gt = np.repeat(np.arange(3), 50)
        got = hdbscan_cluster(pts, min_cluster_size=10, min_samples=5)
        assert adjusted_rand_score(gt, got.labels) >= 0.95


class TestInvariants:
    def test_cluster_size_floor(self):
        rng = np.random.default_rng(3)
        for trial in range(8):
            pts, _ = _blobs(seed=200 + trial)
            pts = np.vstack([pts, rng.uniform(-15, 15, (10, 2))])
            mcs = int(rng.integers(3, 9))
            got = hdbscan_cluster(pts, mcs, 3)
            for cid in set(got.labels) - {-1}:
                assert int(np.sum(got.labels == cid)) >= mcs

    def test_permutation_invariance(self):
        pts, _ = _blobs(seed=11)
        rng = np.random.default_rng(5)
        base = hdbscan_cluster(pts, 5, 3).labels
        for _ in range(4):
            perm = rng.permutation(len(pts))
            permuted = hdbscan_cluster(pts[perm], 5, 3).labels
            restored = np.empty_like(permuted)
            restored[perm] = permuted
            assert canon(restored) == canon(base)

    def test_scaling_invariance(self):
        pts, _ = _blobs(seed=21)
        base = canon(hdbscan_cluster(pts, 5, 3).labels)
        for c in (1e-3, 0.5, 7.0, 1e4):
            assert canon(hdbscan_cluster(pts * c, 5, 3).labels) == base

    def test_labels_contiguous_and_stability_positive(self):
        pts, _ = _blobs(seed=33, k=4)
        got = hdbscan_cluster(pts, 5, 3)
        ids = sorted(set(got.labels) - {-1})
        assert ids == list(range(len(ids)))
        assert set(got.stability) == set(ids)
        assert all(s > 0 for s in got.stability.values())
