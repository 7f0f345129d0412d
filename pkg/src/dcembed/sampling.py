"""Cluster selection, class-balanced batch construction, tuple mining.

Batches never cross cluster boundaries: a learner sees only samples of its
own cluster. Miners return (M, 3) integer arrays of (anchor, positive,
negative) positions into the batch; an empty result marks a degenerate
batch the caller is expected to log and skip.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .validation import as_generator

SAMPLER_KINDS = ("semihard", "distance_weighted", "all_pairs", "none")

# Distance clipping window for the distance-weighted sampler. Below d_min
# the inverse-density weight would explode; the upper end keeps the
# (1 - d^2/4) factor positive.
D_MIN = 0.5
D_MAX = 2.0 - 1e-6


@dataclass(frozen=True)
class BatchSpec:
    """How to draw one mini-batch from a cluster."""

    batch_size: int = 32
    per_class: int = 4
    strategy: str = "balanced"  # or uniform

    def __post_init__(self):
        if self.strategy not in ("balanced", "uniform"):
            raise ConfigError(f"strategy {self.strategy!r} not in (balanced, uniform)")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.strategy == "balanced":
            if self.per_class < 2:
                raise ConfigError(
                    f"balanced batches need per_class >= 2 for a positive pair, "
                    f"got {self.per_class}"
                )
            if self.batch_size % self.per_class != 0:
                raise ConfigError(
                    f"batch_size ({self.batch_size}) must be a multiple of "
                    f"per_class ({self.per_class})"
                )


@dataclass(frozen=True)
class Batch:
    """Sample indices drawn from one cluster, with their labels."""

    indices: np.ndarray
    labels: np.ndarray
    cluster: int
    shrunk: bool = False  # true when the cluster had too few classes


def sample_cluster(n_clusters: int, rng) -> int:
    """Uniform over clusters, independent of cluster sizes."""
    if n_clusters < 1:
        raise DataError(f"n_clusters must be >= 1, got {n_clusters}")
    return int(rng.integers(n_clusters))


def build_batch(indices: np.ndarray, labels: np.ndarray, spec: BatchSpec,
                rng, cluster: int = 0) -> Batch:
    """Draw one batch from the given cluster members.

    balanced: batch_size/per_class distinct classes chosen uniformly, then
    per_class samples from each (with replacement when the class is
    smaller). Clusters with fewer classes yield a shrunk batch. uniform:
    batch_size samples, without replacement when the cluster is large
    enough.
    """
    indices = np.asarray(indices, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if indices.size == 0:
        raise DataError(f"cluster {cluster} is empty")
    if indices.shape != labels.shape:
        raise DataError("indices and labels must be parallel arrays")
    rng = as_generator(rng)

    if spec.strategy == "uniform":
        replace = indices.size < spec.batch_size
        pick = rng.choice(indices.size, size=spec.batch_size, replace=replace)
        return Batch(indices[pick], labels[pick], cluster)

    classes = np.unique(labels)
    want = spec.batch_size // spec.per_class
    shrunk = classes.size < want
    n_classes = min(want, classes.size)
    chosen = rng.choice(classes.size, size=n_classes, replace=False)
    picks = []
    for ci in chosen:
        pos = np.nonzero(labels == classes[ci])[0]
        replace = pos.size < spec.per_class
        picks.append(pos[rng.choice(pos.size, size=spec.per_class, replace=replace)])
    sel = np.concatenate(picks)
    return Batch(indices[sel], labels[sel], cluster, shrunk=shrunk)


def _pairwise_distances(embeddings: np.ndarray) -> np.ndarray:
    diff = embeddings[:, None, :] - embeddings[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _anchor_positive_pairs(labels: np.ndarray):
    n = len(labels)
    for a in range(n):
        for p in range(n):
            if a != p and labels[a] == labels[p]:
                yield a, p


def mine_semihard(embeddings: np.ndarray, labels: np.ndarray,
                  alpha: float) -> np.ndarray:
    """Semihard negatives: for each ordered anchor-positive pair pick the
    hardest negative with d(a,p) < d(a,n) and d(a,n)^2 < d(a,p)^2 + alpha;
    fall back to the hardest negative with d(a,n) >= d(a,p); else skip the
    pair. Fully deterministic (hardest = smallest distance, ties to the
    lowest index)."""
    labels = np.asarray(labels)
    dist = _pairwise_distances(np.asarray(embeddings, dtype=np.float64))
    triples = []
    for a, p in _anchor_positive_pairs(labels):
        d_ap = dist[a, p]
        negs = np.nonzero(labels != labels[a])[0]
        if negs.size == 0:
            continue
        d_an = dist[a, negs]
        semi = negs[(d_an > d_ap) & (d_an ** 2 < d_ap ** 2 + alpha)]
        pool = semi if semi.size else negs[d_an >= d_ap]
        if pool.size == 0:
            continue
        d_pool = dist[a, pool]
        best = pool[int(np.argmin(d_pool))]
        triples.append((a, p, best))
    return np.asarray(triples, dtype=np.int64).reshape(-1, 3)


def distance_density(d: np.ndarray, dim: int) -> np.ndarray:
    """Unnormalized pairwise-distance density q(d) on the unit sphere S^(dim-1):
    q(d) proportional to d^(dim-2) * (1 - d^2/4)^((dim-3)/2)."""
    d = np.asarray(d, dtype=np.float64)
    return d ** (dim - 2) * (1.0 - np.square(d) / 4.0) ** ((dim - 3) / 2.0)


def mine_distance_weighted(embeddings: np.ndarray, labels: np.ndarray,
                           lambda_cut: float = 1.4, rng=None,
                           dim: Optional[int] = None) -> np.ndarray:
    """One negative per ordered anchor-positive pair, drawn with probability
    proportional to min(lambda, q(d)^-1), where q is the spherical
    pairwise-distance density and lambda = lambda_cut * q(D_MIN)^-1.
    Distances are clipped to [D_MIN, D_MAX] before weighting."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    rng = as_generator(rng)
    dim = embeddings.shape[1] if dim is None else dim
    if dim < 3:
        raise ConfigError(
            f"distance-weighted mining needs embedding dimension >= 3, got {dim}"
        )
    dist = _pairwise_distances(embeddings)
    # log-space weights for numerical range safety
    log_cap = np.log(lambda_cut) - np.log(distance_density(np.array(D_MIN), dim))
    triples = []
    for a, p in _anchor_positive_pairs(labels):
        negs = np.nonzero(labels != labels[a])[0]
        if negs.size == 0:
            continue
        d = np.clip(dist[a, negs], D_MIN, D_MAX)
        log_w = np.minimum(-np.log(distance_density(d, dim)), log_cap)
        w = np.exp(log_w - log_w.max())
        probs = w / w.sum()
        pick = negs[int(rng.choice(negs.size, p=probs))]
        triples.append((a, p, pick))
    return np.asarray(triples, dtype=np.int64).reshape(-1, 3)


def mine_all(labels: np.ndarray) -> np.ndarray:
    """Every valid (anchor, positive, negative) combination."""
    labels = np.asarray(labels)
    triples = []
    for a, p in _anchor_positive_pairs(labels):
        for n in np.nonzero(labels != labels[a])[0]:
            triples.append((a, p, n))
    return np.asarray(triples, dtype=np.int64).reshape(-1, 3)


def mine(kind: str, embeddings: np.ndarray, labels: np.ndarray, *,
         alpha: float = 0.2, lambda_cut: float = 1.4, rng=None) -> np.ndarray:
    """Dispatch to the configured miner. kind 'none' mines nothing (used by
    the proxy loss, which consumes whole batches)."""
    if kind == "semihard":
        return mine_semihard(embeddings, labels, alpha)
    if kind == "distance_weighted":
        return mine_distance_weighted(embeddings, labels, lambda_cut, rng)
    if kind == "all_pairs":
        return mine_all(labels)
    if kind == "none":
        return np.empty((0, 3), dtype=np.int64)
    raise ConfigError(f"sampler kind {kind!r} not in {SAMPLER_KINDS}")
