"""Metric-learning losses with values and analytic gradients.

All three losses operate on embedding vectors and are purely distance
based, so they are invariant to a common rotation of their inputs. Hinges
use the 0 subgradient at their kink; every gradient is exactly zero where
its hinge is inactive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

LOSS_KINDS = ("triplet", "margin", "proxy_nca")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "margin"
    alpha: float = 0.2
    beta_init: float = 1.2
    beta_lr: float = 0.01
    beta_mode: str = "global"  # or per_class: one boundary per anchor class

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind {self.kind!r} not in {LOSS_KINDS}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta_init > 0:
            raise ValueError(f"beta_init must be > 0, got {self.beta_init}")
        if self.beta_mode not in ("global", "per_class"):
            raise ValueError(f"beta_mode {self.beta_mode!r} not in (global, per_class)")


def triplet_loss(a, p, n, alpha: float):
    """[d(a,p)^2 - d(a,n)^2 + alpha]_+ and gradients w.r.t. a, p, n."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    d_ap2 = float(np.sum((a - p) ** 2))
    d_an2 = float(np.sum((a - n) ** 2))
    loss = d_ap2 - d_an2 + alpha
    if loss <= 0.0:
        z = np.zeros_like(a)
        return 0.0, z, z.copy(), z.copy()
    return loss, 2.0 * (n - p), 2.0 * (p - a), 2.0 * (a - n)


def margin_loss(x_i, x_j, relation: str, alpha: float, beta: float):
    """[alpha + y*(d(x_i,x_j) - beta)]_+ with y=+1 positive, -1 negative.

    Returns (loss, grad x_i, grad x_j, grad beta). The distance gradient
    uses the 0 subgradient when the pair coincides (d=0).
    """
    if relation not in ("positive", "negative"):
        raise ValueError(f"relation must be positive or negative, got {relation!r}")
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    y = 1.0 if relation == "positive" else -1.0
    diff = x_i - x_j
    d = float(np.linalg.norm(diff))
    loss = alpha + y * (d - beta)
    if loss <= 0.0:
        z = np.zeros_like(x_i)
        return 0.0, z, z.copy(), 0.0
    direction = diff / d if d > 0.0 else np.zeros_like(diff)
    return loss, y * direction, -y * direction, -y


class ProxyBank:
    """One unit-length proxy vector per class, for one learner."""

    def __init__(self, classes, vectors):
        classes = np.asarray(classes, dtype=np.int64)
        vectors = np.array(vectors, dtype=np.float64)
        if classes.ndim != 1 or vectors.ndim != 2 or len(classes) != len(vectors):
            raise ValueError("classes and vectors must be parallel 1-D/2-D arrays")
        if len(np.unique(classes)) != len(classes):
            raise ValueError("duplicate class ids in proxy bank")
        order = np.argsort(classes)
        self.classes = classes[order]
        self.vectors = vectors[order]
        self.renormalize()

    @classmethod
    def from_centroids(cls, embeddings, labels) -> "ProxyBank":
        """Initialize proxies at the normalized per-class embedding means."""
        embeddings = np.asarray(embeddings, dtype=np.float64)
        labels = np.asarray(labels)
        classes = np.unique(labels)
        vectors = np.stack([embeddings[labels == c].mean(axis=0) for c in classes])
        return cls(classes, vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index_of(self, y: int) -> int:
        i = int(np.searchsorted(self.classes, y))
        if i >= len(self.classes) or self.classes[i] != y:
            raise ValueError(f"no proxy for class {y}")
        return i

    def renormalize(self) -> None:
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        if (norms == 0.0).any():
            bad = int(self.classes[np.nonzero(norms.ravel() == 0.0)[0][0]])
            raise ValueError(f"zero-norm proxy for class {bad}")
        self.vectors /= norms


def proxy_nca_loss(x, y: int, proxies: ProxyBank):
    """-log(exp(-d(x,p_y)^2) / sum_{z != y} exp(-d(x,p_z)^2)).

    Returns (loss, grad x, grad matrix over proxies.vectors). The
    denominator excludes the positive proxy, so the loss can be negative.
    """
    if len(proxies.classes) < 2:
        raise ValueError("proxy_nca_loss requires proxies for >= 2 classes")
    x = np.asarray(x, dtype=np.float64)
    iy = proxies.index_of(int(y))
    diffs = x - proxies.vectors
    sq = np.sum(diffs * diffs, axis=1)
    neg = np.arange(len(proxies.classes)) != iy
    scores = -sq[neg]
    lse = float(logsumexp(scores))
    loss = float(sq[iy]) + lse

    w = np.exp(scores - lse)
    grad_proxies = np.zeros_like(proxies.vectors)
    grad_proxies[iy] = -2.0 * diffs[iy]
    grad_proxies[neg] = 2.0 * w[:, None] * diffs[neg]
    grad_x = 2.0 * diffs[iy] - 2.0 * (w[:, None] * diffs[neg]).sum(axis=0)
    return loss, grad_x, grad_proxies


class BetaParam:
    """Learnable margin boundary: one value, or one per anchor class."""

    def __init__(self, beta_init: float, mode: str = "global", classes=None):
        self.mode = mode
        if mode == "global":
            self.classes = None
            self.values = np.full(1, float(beta_init))
        else:
            if classes is None:
                raise ValueError("per_class beta requires the class list")
            self.classes = np.sort(np.asarray(classes, dtype=np.int64))
            self.values = np.full(len(self.classes), float(beta_init))

    def index_for(self, anchor_class: int) -> int:
        if self.mode == "global":
            return 0
        i = int(np.searchsorted(self.classes, anchor_class))
        if i >= len(self.classes) or self.classes[i] != anchor_class:
            raise ValueError(f"no beta entry for class {anchor_class}")
        return i

    def value_for(self, anchor_class: int) -> float:
        return float(self.values[self.index_for(anchor_class)])

    def mean(self) -> float:
        return float(self.values.mean())


@dataclass
class BatchLossResult:
    loss: float
    grad_embeddings: np.ndarray
    n_terms: int
    beta_grad: np.ndarray = None
    proxy_grad: np.ndarray = None
    degenerate: bool = field(init=False)

    def __post_init__(self):
        self.degenerate = self.n_terms == 0


def batch_loss(embeddings, labels, cfg: LossConfig, tuples,
               beta: BetaParam = None, proxies: ProxyBank = None) -> BatchLossResult:
    """Mean loss over mined tuples with grads summed per batch embedding.

    triplet: mean over (a,p,n) triples. margin: each triple contributes its
    (a,p) positive and (a,n) negative pair, mean over pairs. proxy_nca:
    tuples are ignored, mean over batch points. An empty term set (no
    tuples, or a single-class proxy bank) is a degenerate batch: loss 0,
    zero grads, flagged for the caller to log.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    grads = np.zeros_like(embeddings)

    if cfg.kind == "proxy_nca":
        if proxies is None:
            raise ValueError("proxy_nca batch loss requires a ProxyBank")
        proxy_grad = np.zeros_like(proxies.vectors)
        if len(proxies.classes) < 2 or len(embeddings) == 0:
            return BatchLossResult(0.0, grads, 0, proxy_grad=proxy_grad)
        total = 0.0
        for i in range(len(embeddings)):
            li, gx, gp = proxy_nca_loss(embeddings[i], int(labels[i]), proxies)
            total += li
            grads[i] += gx
            proxy_grad += gp
        count = len(embeddings)
        grads /= count
        proxy_grad /= count
        return BatchLossResult(total / count, grads, count, proxy_grad=proxy_grad)

    tuples = np.asarray(tuples, dtype=np.int64).reshape(-1, 3)
    if cfg.kind == "triplet":
        if len(tuples) == 0:
            return BatchLossResult(0.0, grads, 0)
        total = 0.0
        for a, p, n in tuples:
            li, ga, gp, gn = triplet_loss(
                embeddings[a], embeddings[p], embeddings[n], cfg.alpha
            )
            total += li
            grads[a] += ga
            grads[p] += gp
            grads[n] += gn
        grads /= len(tuples)
        return BatchLossResult(total / len(tuples), grads, len(tuples))

    # margin
    if beta is None:
        raise ValueError("margin batch loss requires a BetaParam")
    beta_grad = np.zeros_like(beta.values)
    if len(tuples) == 0:
        return BatchLossResult(0.0, grads, 0, beta_grad=beta_grad)
    total = 0.0
    count = 0
    for a, p, n in tuples:
        b_idx = beta.index_for(int(labels[a]))
        b_val = float(beta.values[b_idx])
        for j, relation in ((p, "positive"), (n, "negative")):
            li, gi, gj, gb = margin_loss(
                embeddings[a], embeddings[j], relation, cfg.alpha, b_val
            )
            total += li
            grads[a] += gi
            grads[j] += gj
            beta_grad[b_idx] += gb
            count += 1
    grads /= count
    beta_grad /= count
    return BatchLossResult(total / count, grads, count, beta_grad=beta_grad)
