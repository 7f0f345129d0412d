"""Data partitioning: k-means in embedding space, cluster-to-learner
matching across re-clusterings, and the fixed partitioners used by the
grouping ablations.

Cluster ids are 0-based throughout. Every returned Partition has all
clusters non-empty; k-means repairs empty clusters by stealing the
farthest point from the largest cluster, which keeps the Lloyd objective
non-increasing (the stolen point becomes its own centroid).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError
from .validation import as_generator

# Two totals within this of each other are treated as tied when choosing
# the lexicographically smallest maximizing assignment.
_TIE_TOL = 1e-12


@dataclass(frozen=True)
class Partition:
    """Assignment of n samples to clusters 0..n_clusters-1, none empty."""

    assignment: np.ndarray
    n_clusters: int
    centroids: Optional[np.ndarray] = None
    epoch_created: int = 0
    objectives: tuple = ()

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.ndim != 1 or a.size == 0:
            raise DataError("assignment must be a non-empty 1-D array")
        if self.n_clusters < 1:
            raise DataError(f"n_clusters must be >= 1, got {self.n_clusters}")
        if a.min() < 0 or a.max() >= self.n_clusters:
            raise DataError(
                f"cluster ids must lie in [0, {self.n_clusters}), "
                f"found range [{a.min()}, {a.max()}]"
            )
        sizes = np.bincount(a, minlength=self.n_clusters)
        if (sizes == 0).any():
            empty = int(np.nonzero(sizes == 0)[0][0])
            raise DataError(f"cluster {empty} is empty")
        a.flags.writeable = False
        object.__setattr__(self, "assignment", a)
        if self.centroids is not None:
            c = np.asarray(self.centroids, dtype=np.float64)
            c.flags.writeable = False
            object.__setattr__(self, "centroids", c)

    @property
    def n(self) -> int:
        return len(self.assignment)

    def members(self, k: int) -> np.ndarray:
        return np.nonzero(self.assignment == k)[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clusters)

    def relabeled(self, learner_for_cluster: np.ndarray) -> "Partition":
        """Rename cluster ids so cluster j becomes learner_for_cluster[j]."""
        mapping = np.asarray(learner_for_cluster, dtype=np.int64)
        return Partition(
            assignment=mapping[self.assignment],
            n_clusters=self.n_clusters,
            centroids=None if self.centroids is None
            else self.centroids[np.argsort(mapping)],
            epoch_created=self.epoch_created,
            objectives=self.objectives,
        )


@dataclass(frozen=True)
class AssignmentMatch:
    """Maximum-total-IoU bijection between new clusters and learners."""

    cluster_for_learner: np.ndarray
    total_iou: float

    def __post_init__(self):
        p = np.asarray(self.cluster_for_learner, dtype=np.int64)
        if sorted(p.tolist()) != list(range(len(p))):
            raise ValueError(f"not a permutation: {p.tolist()}")
        p.flags.writeable = False
        object.__setattr__(self, "cluster_for_learner", p)

    @property
    def learner_for_cluster(self) -> np.ndarray:
        inv = np.empty_like(self.cluster_for_learner)
        inv[self.cluster_for_learner] = np.arange(len(inv))
        return inv


def kmeans(points: np.ndarray, n_clusters: int, max_iters: int = 100,
           rng=None, epoch: int = 0) -> Partition:
    """Lloyd's algorithm with k-means++ seeding.

    Runs to an assignment fixpoint or max_iters. The objective (sum of
    squared point-to-centroid distances, evaluated after each centroid
    update) is recorded per iteration and verified non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DataError(f"points must be 2-D, got shape {points.shape}")
    if max_iters < 1:
        raise DataError(f"max_iters must be >= 1, got {max_iters}")
    if not np.isfinite(points).all():
        raise DataError("points contain non-finite values")
    n = points.shape[0]
    if n < n_clusters:
        raise DataError(f"cannot form {n_clusters} clusters from {n} points")
    if n_clusters > 1 and (points == points[0]).all():
        raise DataError(
            f"all {n} points are identical: no {n_clusters}-way clustering exists"
        )
    rng = as_generator(rng)

    centroids = points[_seed_plusplus(points, n_clusters, rng)].copy()
    assignment = None
    objectives = []
    for _ in range(max_iters):
        sq = _sqdist(points, centroids)
        new_assignment = np.argmin(sq, axis=1)  # first minimum: lowest id wins
        new_assignment = _repair_empty(points, new_assignment, n_clusters)
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        centroids = _update_centroids(points, assignment, n_clusters)
        obj = float(
            np.sum((points - centroids[assignment]) ** 2)
        )
        if objectives and obj > objectives[-1] * (1 + 1e-12) + 1e-15:
            raise RuntimeError(
                f"k-means objective increased: {objectives[-1]} -> {obj}"
            )
        objectives.append(obj)

    return Partition(
        assignment=assignment,
        n_clusters=n_clusters,
        centroids=centroids,
        epoch_created=epoch,
        objectives=tuple(objectives),
    )


def _sqdist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.sum(diff * diff, axis=2)


def _seed_plusplus(points: np.ndarray, k: int, rng) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0.0:
            # remaining mass degenerate: take the lowest unchosen index
            left = sorted(set(range(n)) - set(chosen))
            chosen.append(left[0])
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            chosen.append(min(idx, n - 1))
        d2 = np.minimum(d2, np.sum((points - points[chosen[-1]]) ** 2, axis=1))
    return np.asarray(chosen)


def _repair_empty(points: np.ndarray, assignment: np.ndarray, k: int) -> np.ndarray:
    sizes = np.bincount(assignment, minlength=k)
    if not (sizes == 0).any():
        return assignment
    assignment = assignment.copy()
    for empty in np.nonzero(sizes == 0)[0]:
        donor = int(np.argmax(sizes))  # largest cluster, lowest id on ties
        members = np.nonzero(assignment == donor)[0]
        center = points[members].mean(axis=0)
        far = np.sum((points[members] - center) ** 2, axis=1)
        victim = members[int(np.argmax(far))]  # farthest, lowest index on ties
        assignment[victim] = empty
        sizes[donor] -= 1
        sizes[empty] += 1
    return assignment


def _update_centroids(points: np.ndarray, assignment: np.ndarray, k: int) -> np.ndarray:
    centroids = np.empty((k, points.shape[1]))
    for c in range(k):
        centroids[c] = points[assignment == c].mean(axis=0)
    return centroids


def iou_matrix(prev: Partition, next: Partition) -> np.ndarray:
    """Entry (i, j) = |prev cluster i AND next cluster j| / |i OR j|."""
    if prev.n != next.n:
        raise DataError(f"partition sizes differ: {prev.n} vs {next.n}")
    kp, kn = prev.n_clusters, next.n_clusters
    joint = np.bincount(
        prev.assignment * kn + next.assignment, minlength=kp * kn
    ).reshape(kp, kn).astype(np.float64)
    union = prev.sizes()[:, None] + next.sizes()[None, :] - joint
    return joint / union


def match_learners(iou: np.ndarray) -> AssignmentMatch:
    """Bijection learners -> new clusters maximizing total IoU.

    Among maximizing bijections returns the lexicographically smallest
    cluster_for_learner vector, so ties resolve in favor of the lowest
    learner index keeping its lowest-numbered candidate cluster.
    """
    iou = np.asarray(iou, dtype=np.float64)
    if iou.ndim != 2 or iou.shape[0] != iou.shape[1]:
        raise ValueError(f"IoU matrix must be square, got shape {iou.shape}")
    k = iou.shape[0]

    def best_total(sub: np.ndarray) -> float:
        if sub.size == 0:
            return 0.0
        rows, cols = linear_sum_assignment(-sub)
        return float(sub[rows, cols].sum())

    target = best_total(iou)
    chosen = []
    free = list(range(k))
    prefix = 0.0
    for i in range(k):
        for pos, j in enumerate(free):
            rest = iou[np.ix_(range(i + 1, k), free[:pos] + free[pos + 1:])]
            if prefix + iou[i, j] + best_total(rest) >= target - _TIE_TOL:
                prefix += iou[i, j]
                chosen.append(j)
                free.pop(pos)
                break
    return AssignmentMatch(np.asarray(chosen), total_iou=target)


def nearest_centroid_assignment(points: np.ndarray,
                                centroids: np.ndarray) -> np.ndarray:
    """Cluster id of the nearest centroid per point (lowest id on ties).

    Unlike a Partition, the result may leave some clusters empty; it is
    meant for mapping held-out points onto an existing clustering.
    """
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    return np.argmin(_sqdist(points, centroids), axis=1).astype(np.int64)


def random_partition(n: int, n_clusters: int, rng=None) -> Partition:
    """Uniform assignment with every cluster guaranteed non-empty."""
    if n < n_clusters:
        raise DataError(f"cannot form {n_clusters} clusters from {n} points")
    rng = as_generator(rng)
    assignment = np.empty(n, dtype=np.int64)
    order = rng.permutation(n)
    assignment[order[:n_clusters]] = np.arange(n_clusters)
    if n > n_clusters:
        assignment[order[n_clusters:]] = rng.integers(0, n_clusters, size=n - n_clusters)
    return Partition(assignment=assignment, n_clusters=n_clusters)


def label_partition(labels: np.ndarray, n_clusters: int,
                    group_map: Optional[dict] = None) -> Partition:
    """Group samples by their class's cluster.

    Default map: sorted class ids are chunked into n_clusters contiguous
    groups of near-equal count.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if group_map is None:
        if len(classes) < n_clusters:
            raise DataError(
                f"{len(classes)} classes cannot fill {n_clusters} clusters"
            )
        group_map = {}
        for g, chunk in enumerate(np.array_split(classes, n_clusters)):
            for c in chunk:
                group_map[int(c)] = g
    missing = sorted(set(classes.tolist()) - set(group_map))
    if missing:
        raise DataError(f"group_map lacks entries for classes {missing}")
    bad = {c: g for c, g in group_map.items() if not 0 <= g < n_clusters}
    if bad:
        raise DataError(f"group_map targets outside [0, {n_clusters}): {bad}")
    assignment = np.asarray([group_map[int(c)] for c in labels], dtype=np.int64)
    return Partition(assignment=assignment, n_clusters=n_clusters)
