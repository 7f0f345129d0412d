"""Retrieval and clustering metrics plus slice-level diagnostics.

All nearest-neighbor work is exhaustive (no approximate indices) and ties
are broken toward the lower sample index, so every metric here can be
checked against a brute-force oracle exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError
from .partition import Partition, kmeans
from .validation import as_generator

log = logging.getLogger(__name__)

HIST_BINS = 64
HIST_RANGE = (0.0, 2.0)
# above this many samples, negative-pair histograms subsample pairs
ENUMERATE_PAIR_LIMIT = 2000


def pairwise_sqdist(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Direct (difference-based) squared distances, chunked over rows of a."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]))
    for lo in range(0, a.shape[0], chunk):
        hi = min(lo + chunk, a.shape[0])
        diff = a[lo:hi, None, :] - b[None, :, :]
        out[lo:hi] = np.sum(diff * diff, axis=2)
    return out


def recall_at_k(embeddings: np.ndarray, labels: np.ndarray, ks) -> dict:
    """Fraction of queries with a same-class sample among their k nearest
    neighbors (self excluded, ties to the lower index)."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = embeddings.shape[0]
    ks = sorted(int(k) for k in ks)
    if n < 2:
        raise DataError(f"recall needs >= 2 samples, got {n}")
    if ks[0] < 1 or ks[-1] >= n:
        raise DataError(f"every k must lie in [1, {n - 1}], got {ks}")

    sq = pairwise_sqdist(embeddings, embeddings)
    np.fill_diagonal(sq, np.inf)
    order = np.argsort(sq, axis=1, kind="stable")[:, : ks[-1]]
    neighbor_hits = labels[order] == labels[:, None]
    return {
        k: float(neighbor_hits[:, :k].any(axis=1).mean())
        for k in ks
    }


def nmi(predicted: np.ndarray, truth: np.ndarray) -> float:
    """2 I(P,T) / (H(P) + H(T)) with natural logs; two single-cluster
    partitions score 1 by the 0/0 convention."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape or predicted.ndim != 1:
        raise DataError(
            f"label arrays must be 1-D and equal length, got "
            f"{predicted.shape} vs {truth.shape}"
        )
    n = len(predicted)
    if n == 0:
        raise DataError("nmi of empty arrays is undefined")
    _, pi = np.unique(predicted, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    kp, kt = pi.max() + 1, ti.max() + 1
    joint = np.bincount(pi * kt + ti, minlength=kp * kt).reshape(kp, kt) / n
    pp = joint.sum(axis=1)
    pt = joint.sum(axis=0)

    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(pp, pt)[nz])))
    hp = float(-np.sum(pp[pp > 0] * np.log(pp[pp > 0])))
    ht = float(-np.sum(pt[pt > 0] * np.log(pt[pt > 0])))
    if hp + ht == 0.0:
        return 1.0
    return 2.0 * mi / (hp + ht)


def map_single_query(query_emb, query_labels, gallery_emb, gallery_labels,
                     exclude_self: bool = False) -> float:
    """Mean over queries of average precision across all relevant gallery
    items. Queries with no relevant item are excluded (and logged).
    exclude_self skips gallery index i for query i (same-set evaluation)."""
    query_emb = np.asarray(query_emb, dtype=np.float64)
    gallery_emb = np.asarray(gallery_emb, dtype=np.float64)
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)

    sq = pairwise_sqdist(query_emb, gallery_emb)
    if exclude_self:
        np.fill_diagonal(sq, np.inf)
    aps = []
    skipped = 0
    for i in range(len(query_emb)):
        relevant = gallery_labels == query_labels[i]
        if exclude_self:
            relevant = relevant.copy()
            if i < len(relevant):
                relevant[i] = False
        if not relevant.any():
            skipped += 1
            continue
        order = np.argsort(sq[i], kind="stable")
        rel_ranks = np.nonzero(relevant[order])[0] + 1  # 1-based ranks
        precision = np.arange(1, len(rel_ranks) + 1) / rel_ranks
        aps.append(float(precision.mean()))
    if skipped:
        log.warning("map_single_query: excluded %d queries with no relevant item",
                    skipped)
    if not aps:
        raise DataError("every query had zero relevant gallery items")
    return float(np.mean(aps))


def slice_embeddings(model, features: np.ndarray) -> list:
    """Per-learner unit embeddings of a feature matrix."""
    return [model.forward(features, k) for k in range(model.n_slices)]


def per_learner_recall(model, features, labels, ks) -> list:
    """Recall@k computed independently inside each learner's slice space."""
    return [recall_at_k(e, labels, ks) for e in slice_embeddings(model, features)]


def prefix_recall(model, features, labels, ks) -> list:
    """Recall@k of the concatenation of slices 0..p-1 (renormalized), for
    p = 1..K."""
    slices = slice_embeddings(model, features)
    out = []
    for p in range(1, model.n_slices + 1):
        emb = np.concatenate(slices[:p], axis=1) / np.sqrt(p)
        out.append(recall_at_k(emb, labels, ks))
    return out


def cross_slice_correlation(slices: list) -> float:
    """Mean absolute Pearson correlation over all dimension pairs drawn
    from different slices. Zero-variance dimensions are excluded (logged)."""
    n = slices[0].shape[0]
    if n < 3:
        raise DataError(f"correlation needs >= 3 samples, got {n}")
    dims = np.concatenate(slices, axis=1).T  # (d, n)
    owner = np.concatenate([
        np.full(s.shape[1], i) for i, s in enumerate(slices)
    ])
    keep = dims.std(axis=1) > 0.0
    if not keep.all():
        log.warning("cross_slice_correlation: excluded %d zero-variance dims",
                    int((~keep).sum()))
    dims, owner = dims[keep], owner[keep]
    if len(dims) < 2 or len(np.unique(owner)) < 2:
        raise DataError("not enough varying dimensions across slices")
    corr = np.corrcoef(dims)
    cross = owner[:, None] != owner[None, :]
    return float(np.abs(corr[cross]).mean())


def learner_correlation(model, features) -> float:
    """Cross-slice correlation of the model's embeddings on a dataset."""
    if model.n_slices < 2:
        raise DataError("learner_correlation needs a model with >= 2 slices")
    return cross_slice_correlation(slice_embeddings(model, features))


def baseline_dimension_correlation(embeddings: np.ndarray, n_groups: int) -> float:
    """Cross-group correlation of a plain embedding matrix, with dimensions
    split into n_groups contiguous blocks. Comparator for models trained
    without splitting."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[1] % n_groups:
        raise DataError("embedding width must divide evenly into groups")
    s = embeddings.shape[1] // n_groups
    return cross_slice_correlation(
        [embeddings[:, i * s:(i + 1) * s] for i in range(n_groups)]
    )


@dataclass(frozen=True)
class HistogramPair:
    """Binned negative-pair distances, within vs across clusters."""

    bin_edges: np.ndarray
    intra_counts: np.ndarray
    inter_counts: np.ndarray
    intra_mean: Optional[float]
    inter_mean: Optional[float]

    def csv_rows(self) -> list:
        rows = [("scope", "bin_left", "bin_right", "count")]
        for scope, counts in (("intra", self.intra_counts),
                              ("inter", self.inter_counts)):
            for b in range(len(counts)):
                rows.append((scope, float(self.bin_edges[b]),
                             float(self.bin_edges[b + 1]), int(counts[b])))
        return rows


def negative_distance_histograms(embeddings, labels, partition,
                                 bins: int = HIST_BINS, rng=None,
                                 max_pairs: int = 200_000) -> HistogramPair:
    """Distances of negative pairs split by cluster co-membership.

    partition is a Partition over these samples or a raw assignment array
    (e.g. held-out points mapped to their nearest centroid). Pairs are
    enumerated exhaustively up to ENUMERATE_PAIR_LIMIT samples, then
    subsampled (seeded rng) beyond that.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    assignment = (partition.assignment if isinstance(partition, Partition)
                  else np.asarray(partition, dtype=np.int64))
    n = len(embeddings)
    if len(assignment) != n:
        raise DataError(f"partition covers {len(assignment)} samples, embeddings {n}")

    i, j = np.triu_indices(n, k=1)
    negative = labels[i] != labels[j]
    i, j = i[negative], j[negative]
    if n > ENUMERATE_PAIR_LIMIT and len(i) > max_pairs:
        rng = as_generator(rng)
        pick = rng.choice(len(i), size=max_pairs, replace=False)
        i, j = i[pick], j[pick]

    d = np.sqrt(np.sum((embeddings[i] - embeddings[j]) ** 2, axis=1))
    same_cluster = assignment[i] == assignment[j]

    def side(mask):
        counts, edges = np.histogram(d[mask], bins=bins, range=HIST_RANGE)
        mean = float(d[mask].mean()) if mask.any() else None
        return counts, edges, mean

    intra_counts, edges, intra_mean = side(same_cluster)
    inter_counts, _, inter_mean = side(~same_cluster)
    if intra_mean is None:
        log.warning("negative_distance_histograms: no intra-cluster negative pairs")
    return HistogramPair(edges, intra_counts, inter_counts, intra_mean, inter_mean)


@dataclass
class MetricReport:
    """Evaluation summary of one embedding on one dataset."""

    recall_at: dict
    nmi: float
    map_score: Optional[float] = None
    per_learner_recall: Optional[list] = None
    prefix_recall: Optional[list] = None
    learner_correlation: Optional[float] = None
    histograms: Optional[HistogramPair] = None
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "nmi": self.nmi,
        }
        if self.map_score is not None:
            out["map"] = self.map_score
        if self.per_learner_recall is not None:
            out["per_learner_recall"] = [
                {str(k): v for k, v in sorted(r.items())}
                for r in self.per_learner_recall
            ]
        if self.prefix_recall is not None:
            out["prefix_recall"] = [
                {str(k): v for k, v in sorted(r.items())}
                for r in self.prefix_recall
            ]
        if self.learner_correlation is not None:
            out["learner_correlation"] = self.learner_correlation
        if self.histograms is not None:
            out["negative_distances"] = {
                "intra_mean": self.histograms.intra_mean,
                "inter_mean": self.histograms.inter_mean,
            }
        if self.notes:
            out["notes"] = self.notes
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def evaluate(model, features, labels, ks=(1, 2, 4, 8), rng=None,
             diagnostics: bool = False, partition: Partition = None) -> MetricReport:
    """Standard evaluation: merged-embedding recall plus clustering NMI
    (k-means with one cluster per class), optionally the slice-level
    diagnostics and negative-distance histograms."""
    labels = np.asarray(labels)
    rng = as_generator(rng)
    emb = model.merge_and_forward(features)
    ks = [k for k in ks if k < len(labels)]
    if not ks:
        raise DataError(f"no valid k for {len(labels)} samples")
    report = MetricReport(
        recall_at=recall_at_k(emb, labels, ks),
        nmi=nmi(kmeans(emb, len(np.unique(labels)), rng=rng).assignment, labels),
        map_score=map_single_query(emb, labels, emb, labels, exclude_self=True),
    )
    if diagnostics and model.n_slices >= 1:
        report.per_learner_recall = per_learner_recall(model, features, labels, ks)
        report.prefix_recall = prefix_recall(model, features, labels, ks)
        if model.n_slices >= 2:
            report.learner_correlation = learner_correlation(model, features)
        if partition is not None:
            report.histograms = negative_distance_histograms(
                emb, labels, partition, rng=rng
            )
    return report
