"""Clustering, IoU matching, and the fixed ablation partitioners."""

import itertools

import numpy as np
import pytest

from dcembed.dataset import SynthSpec, generate_synthetic, mode_of_label
from dcembed.errors import DataError
from dcembed.partition import (
    AssignmentMatch,
    Partition,
    iou_matrix,
    kmeans,
    label_partition,
    match_learners,
    random_partition,
)

TIE_TOL = 1e-12


def brute_force_match(iou: np.ndarray) -> tuple:
    """First lexicographic permutation attaining the max total IoU."""
    k = iou.shape[0]
    best = max(
        sum(iou[i, p[i]] for i in range(k))
        for p in itertools.permutations(range(k))
    )
    for p in itertools.permutations(range(k)):
        if sum(iou[i, p[i]] for i in range(k)) >= best - TIE_TOL:
            return np.asarray(p), best
    raise AssertionError("unreachable")


def exhaustive_kmeans_objective(points: np.ndarray, k: int) -> float:
    """Global optimum of the k-means objective over all assignments."""
    n = len(points)
    total = float(np.sum(points ** 2))
    best = np.inf
    for a in itertools.product(range(k), repeat=n):
        a = np.asarray(a)
        obj = total
        for c in range(k):
            members = points[a == c]
            if len(members):
                obj -= len(members) * float(np.sum(members.mean(axis=0) ** 2))
        best = min(best, obj)
    return best


class TestPartitionType:
    def test_rejects_empty_cluster(self):
        with pytest.raises(DataError, match="empty"):
            Partition(np.array([0, 0, 2]), 3)

    def test_rejects_out_of_range_id(self):
        with pytest.raises(DataError):
            Partition(np.array([0, 3]), 3)

    def test_members_and_sizes(self):
        p = Partition(np.array([1, 0, 1, 1]), 2)
        np.testing.assert_array_equal(p.members(1), [0, 2, 3])
        np.testing.assert_array_equal(p.sizes(), [1, 3])

    def test_relabeled_moves_assignment_and_centroids(self):
        p = Partition(np.array([0, 1, 0]), 2, centroids=np.array([[0.0], [9.0]]))
        q = p.relabeled(np.array([1, 0]))  # cluster 0 becomes learner 1
        np.testing.assert_array_equal(q.assignment, [1, 0, 1])
        np.testing.assert_array_equal(q.centroids, [[9.0], [0.0]])


class TestKmeans:
    def test_two_blobs_recovered_exactly(self):
        pts = np.vstack([np.zeros((5, 2)), np.full((5, 2), 10.0)])
        part = kmeans(pts, 2, rng=np.random.default_rng(0))
        assert part.objectives[-1] == pytest.approx(0.0, abs=1e-18)
        assert len(set(part.assignment[:5])) == 1
        assert len(set(part.assignment[5:])) == 1
        assert part.assignment[0] != part.assignment[5]

    def test_k1_centroid_is_mean(self):
        pts = np.random.default_rng(1).normal(size=(20, 3))
        part = kmeans(pts, 1, rng=np.random.default_rng(2))
        np.testing.assert_allclose(part.centroids[0], pts.mean(axis=0))

    def test_small_instance_reaches_global_optimum_with_restarts(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(10, 2))
        opt = exhaustive_kmeans_objective(pts, 3)
        objs = [
            kmeans(pts, 3, rng=np.random.default_rng(s)).objectives[-1]
            for s in range(200)
        ]
        # every run is bounded below by the global optimum, and the best
        # of many seeds attains it
        assert min(objs) >= opt - 1e-9
        assert min(objs) == pytest.approx(opt, abs=1e-9)

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(4)
        for s in range(100):
            pts = np.random.default_rng(s).normal(size=(40, 4))
            part = kmeans(pts, 5, rng=np.random.default_rng(1000 + s))
            diffs = np.diff(part.objectives)
            assert (diffs <= 1e-9).all()

    def test_deterministic_given_seed(self):
        pts = np.random.default_rng(5).normal(size=(30, 3))
        a = kmeans(pts, 4, rng=np.random.default_rng(7))
        b = kmeans(pts, 4, rng=np.random.default_rng(7))
        np.testing.assert_array_equal(a.assignment, b.assignment)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_too_few_points_rejected(self):
        with pytest.raises(DataError, match="3 clusters from 2"):
            kmeans(np.zeros((2, 2)), 3)

    def test_identical_points_rejected(self):
        with pytest.raises(DataError, match="identical"):
            kmeans(np.ones((10, 2)), 2)

    def test_zero_noise_modes_recovered(self):
        spec = SynthSpec(num_modes=4, classes_per_mode=3, samples_per_class=5,
                         feature_dim=8, mode_separation=8.0, class_spread=0.0,
                         noise_sigma=0.0, seed=9)
        ds = generate_synthetic(spec)
        part = kmeans(ds.features, 4, rng=np.random.default_rng(11))
        modes = mode_of_label(spec, ds.labels)
        # same mode label <=> same cluster label
        for k in range(4):
            assert len(set(modes[part.members(k)])) == 1
        assert len({int(modes[part.members(k)][0]) for k in range(4)}) == 4

    def test_more_clusters_than_distinct_points_fills_all(self):
        # 3 distinct locations, K=3, duplicates present
        pts = np.repeat(np.array([[0.0, 0], [5, 0], [0, 5]]), 3, axis=0)
        part = kmeans(pts, 3, rng=np.random.default_rng(13))
        assert (part.sizes() > 0).all()


class TestIouMatrix:
    def test_identical_partitions_diagonal_one(self):
        p = Partition(np.array([0, 0, 1, 2, 2, 2]), 3)
        m = iou_matrix(p, p)
        np.testing.assert_allclose(np.diag(m), 1.0)
        assert m.sum() == pytest.approx(3.0)  # off-diagonal all zero

    def test_permuted_labels_give_permutation_matrix(self):
        a = np.array([0, 0, 1, 1, 2, 2])
        perm = np.array([2, 0, 1])
        p = Partition(a, 3)
        q = Partition(perm[a], 3)
        m = iou_matrix(p, q)
        expected = np.zeros((3, 3))
        expected[np.arange(3), perm] = 1.0
        np.testing.assert_allclose(m, expected)

    def test_half_swapped_two_clusters(self):
        prev = Partition(np.array([0, 0, 0, 0, 1, 1, 1, 1]), 2)
        nxt = Partition(np.array([0, 0, 1, 1, 1, 1, 0, 0]), 2)
        np.testing.assert_allclose(iou_matrix(prev, nxt), np.full((2, 2), 1 / 3))

    def test_length_mismatch_rejected(self):
        with pytest.raises(DataError):
            iou_matrix(Partition(np.array([0, 1]), 2), Partition(np.array([0, 1, 0]), 2))


class TestMatchLearners:
    def test_identity_matrix(self):
        m = match_learners(np.eye(4))
        np.testing.assert_array_equal(m.cluster_for_learner, np.arange(4))
        assert m.total_iou == pytest.approx(4.0)

    def test_permutation_matrix_recovered(self):
        perm = np.array([2, 0, 3, 1])
        mat = np.zeros((4, 4))
        mat[np.arange(4), perm] = 1.0
        m = match_learners(mat)
        np.testing.assert_array_equal(m.cluster_for_learner, perm)
        inv = np.argsort(perm)
        np.testing.assert_array_equal(m.learner_for_cluster, inv)

    def test_all_ties_pick_lexicographic_minimum(self):
        m = match_learners(np.full((3, 3), 0.5))
        np.testing.assert_array_equal(m.cluster_for_learner, [0, 1, 2])

    @pytest.mark.parametrize("k", [4, 6])
    def test_matches_brute_force(self, k):
        rng = np.random.default_rng(17)
        for _ in range(100):
            iou = rng.random((k, k))
            got = match_learners(iou)
            want_perm, want_total = brute_force_match(iou)
            np.testing.assert_array_equal(got.cluster_for_learner, want_perm)
            assert got.total_iou == pytest.approx(want_total, abs=1e-9)

    def test_self_match_is_identity(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            assignment = rng.integers(0, 4, size=30)
            for c in range(4):  # patch to guarantee non-empty clusters
                assignment[c] = c
            p = Partition(assignment, 4)
            m = match_learners(iou_matrix(p, p))
            np.testing.assert_array_equal(m.cluster_for_learner, np.arange(4))

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match="square"):
            match_learners(np.zeros((2, 3)))

    def test_non_permutation_rejected(self):
        with pytest.raises(ValueError, match="permutation"):
            AssignmentMatch(np.array([0, 0]), 1.0)


class TestRandomPartition:
    def test_n_equals_k_gives_singletons(self):
        p = random_partition(8, 8, np.random.default_rng(0))
        np.testing.assert_array_equal(np.sort(p.assignment), np.arange(8))

    def test_deterministic(self):
        a = random_partition(100, 5, np.random.default_rng(3))
        b = random_partition(100, 5, np.random.default_rng(3))
        np.testing.assert_array_equal(a.assignment, b.assignment)

    def test_sizes_near_uniform(self):
        n, k = 1000, 8
        p = random_partition(n, k, np.random.default_rng(5))
        expected = n / k
        sigma = np.sqrt(n * (1 / k) * (1 - 1 / k))
        assert (np.abs(p.sizes() - expected) <= 3 * sigma).all()

    def test_all_clusters_non_empty_small_n(self):
        for seed in range(50):
            p = random_partition(9, 8, np.random.default_rng(seed))
            assert (p.sizes() > 0).all()


class TestLabelPartition:
    def test_identity_map_gives_class_partition(self):
        labels = np.array([0, 1, 2, 0, 1, 2])
        p = label_partition(labels, 3, {0: 0, 1: 1, 2: 2})
        np.testing.assert_array_equal(p.assignment, labels)

    def test_single_cluster(self):
        p = label_partition(np.array([3, 5, 9]), 1, {3: 0, 5: 0, 9: 0})
        assert (p.assignment == 0).all()

    def test_default_grouping_matches_zero_noise_kmeans(self):
        spec = SynthSpec(num_modes=3, classes_per_mode=4, samples_per_class=4,
                         feature_dim=6, mode_separation=9.0, class_spread=0.0,
                         noise_sigma=0.0, seed=21)
        ds = generate_synthetic(spec)
        by_label = label_partition(ds.labels, 3)
        by_kmeans = kmeans(ds.features, 3, rng=np.random.default_rng(23))
        # same partition up to cluster renaming
        pairs = set(zip(by_label.assignment.tolist(), by_kmeans.assignment.tolist()))
        assert len(pairs) == 3

    def test_unmapped_class_rejected(self):
        with pytest.raises(DataError, match="lacks"):
            label_partition(np.array([0, 1]), 2, {0: 0})

    def test_out_of_range_group_rejected(self):
        with pytest.raises(DataError, match="outside"):
            label_partition(np.array([0, 1]), 2, {0: 0, 1: 5})

    def test_too_few_classes_for_default_map(self):
        with pytest.raises(DataError):
            label_partition(np.array([0, 0, 1, 1]), 3)
