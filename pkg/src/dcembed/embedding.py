"""Embedding model: optional adapter, linear embedding layer, slice views.

The embedding weight W (d x h) is split into K contiguous row blocks
("learners"). During divided training each learner trains only its own
block; the adapter (affine + ReLU) is shared by all learners. Outputs are
L2-normalized per slice; the merged embedding concatenates the K
unit-length slice vectors and scales by 1/sqrt(K), so it is unit length
too. With K=1 the scale is exactly 1.0 and merged == slice output bitwise.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .validation import as_generator, check_feature_matrix

# Fixed chunk size for full-dataset forward passes. Chunks are computed
# independently and written to disjoint output rows, so results are bitwise
# identical for any thread count (DCE_THREADS).
EMBED_CHUNK = 256


@dataclass(frozen=True)
class Gradients:
    """Parameter gradients from one backward pass.

    weight_slices maps slice index -> gradient for that block of W rows;
    only the active slice is present in sliced mode, all K in merged mode.
    Adapter entries are None when the model has no adapter.
    """

    weight_slices: dict
    adapter_weight: Optional[np.ndarray]
    adapter_bias: Optional[np.ndarray]


class EmbeddingModel:
    """Maps input features R^m -> unit-sphere embeddings R^d in K slices."""

    def __init__(self, in_dim: int, embed_dim: int, n_slices: int = 1,
                 use_adapter: bool = True, adapter_dim: Optional[int] = None,
                 rng=None):
        if in_dim < 1 or embed_dim < 1 or n_slices < 1:
            raise ValueError("in_dim, embed_dim and n_slices must be >= 1")
        if embed_dim % n_slices != 0:
            raise ValueError(
                f"embed_dim ({embed_dim}) must be divisible by n_slices ({n_slices})"
            )
        rng = as_generator(rng)
        self.in_dim = in_dim
        self.embed_dim = embed_dim
        self.n_slices = n_slices
        self.use_adapter = use_adapter
        h = adapter_dim if adapter_dim is not None else in_dim
        self.hidden_dim = h if use_adapter else in_dim

        if use_adapter:
            # near-identity start so the epoch-0 clustering sees input geometry
            self.adapter_weight = np.eye(self.hidden_dim, in_dim) \
                + rng.normal(0.0, 0.01, size=(self.hidden_dim, in_dim))
            self.adapter_bias = np.zeros(self.hidden_dim)
        else:
            self.adapter_weight = None
            self.adapter_bias = None
        self.weight = rng.normal(
            0.0, 1.0 / np.sqrt(self.hidden_dim), size=(embed_dim, self.hidden_dim)
        )

    @property
    def slice_dim(self) -> int:
        return self.embed_dim // self.n_slices

    def slice_bounds(self, k: int) -> tuple:
        """Half-open row interval [lo, hi) of slice k in the weight matrix."""
        if not 0 <= k < self.n_slices:
            raise ValueError(f"slice index {k} out of range [0, {self.n_slices})")
        s = self.slice_dim
        return k * s, (k + 1) * s

    def _adapt(self, x: np.ndarray) -> tuple:
        """Adapter forward; returns (activation, relu mask or None)."""
        if not self.use_adapter:
            return x, None
        pre = x @ self.adapter_weight.T + self.adapter_bias
        mask = pre > 0.0
        return np.where(mask, pre, 0.0), mask

    def forward(self, x: np.ndarray, learner: Optional[int] = None) -> np.ndarray:
        """Embed a batch; rows are unit length.

        learner k: that slice's d/K-dim embedding, normalized on its own.
        learner None: all K normalized slices concatenated, scaled 1/sqrt(K).
        """
        x = check_feature_matrix(x, "x")
        a, _ = self._adapt(x)
        if learner is not None:
            lo, hi = self.slice_bounds(learner)
            return _normalize_rows(a @ self.weight[lo:hi].T)
        out = np.empty((x.shape[0], self.embed_dim))
        for k in range(self.n_slices):
            lo, hi = self.slice_bounds(k)
            out[:, lo:hi] = _normalize_rows(a @ self.weight[lo:hi].T)
        out *= 1.0 / np.sqrt(self.n_slices)
        return out

    def merge_and_forward(self, x: np.ndarray) -> np.ndarray:
        """Full merged embedding (alias of forward with no learner)."""
        return self.forward(x, learner=None)

    def backward(self, x: np.ndarray, grad_out: np.ndarray,
                 learner: Optional[int] = None) -> Gradients:
        """Gradients of sum(grad_out * forward(x, learner)) w.r.t. parameters.

        Forward internals are recomputed; nothing is cached on the model.
        """
        x = check_feature_matrix(x, "x")
        a, mask = self._adapt(x)
        grad_out = np.asarray(grad_out, dtype=np.float64)

        want = self.slice_dim if learner is not None else self.embed_dim
        if grad_out.shape != (x.shape[0], want):
            raise ValueError(
                f"grad_out shape {grad_out.shape} does not match "
                f"output shape {(x.shape[0], want)}"
            )

        slices = [learner] if learner is not None else list(range(self.n_slices))
        scale = 1.0 if learner is not None else 1.0 / np.sqrt(self.n_slices)
        weight_slices = {}
        grad_a = np.zeros_like(a)
        for k in slices:
            lo, hi = self.slice_bounds(k)
            wk = self.weight[lo:hi]
            z = a @ wk.T
            norms = np.linalg.norm(z, axis=1, keepdims=True)
            if (norms == 0.0).any():
                raise ValueError(
                    f"zero-norm pre-normalization output in slice {k}: "
                    "embedding direction undefined"
                )
            u = z / norms
            if learner is not None:
                g_u = grad_out * scale
            else:
                g_u = grad_out[:, lo:hi] * scale
            # Jacobian of z/||z||: (I - u u^T)/||z|| applied row-wise
            g_z = (g_u - (g_u * u).sum(axis=1, keepdims=True) * u) / norms
            weight_slices[k] = g_z.T @ a
            grad_a += g_z @ wk

        if not self.use_adapter:
            return Gradients(weight_slices, None, None)
        g_pre = np.where(mask, grad_a, 0.0)
        return Gradients(weight_slices, g_pre.T @ x, g_pre.sum(axis=0))

    def state_arrays(self) -> dict:
        """Parameter arrays by name, for checkpointing."""
        out = {"weight": self.weight}
        if self.use_adapter:
            out["adapter_weight"] = self.adapter_weight
            out["adapter_bias"] = self.adapter_bias
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for name, current in self.state_arrays().items():
            new = arrays[name]
            if new.shape != current.shape:
                raise ValueError(
                    f"{name}: checkpoint shape {new.shape} vs model {current.shape}"
                )
            current[...] = new


def _normalize_rows(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if (norms == 0.0).any():
        row = int(np.nonzero(norms.ravel() == 0.0)[0][0])
        raise ValueError(
            f"zero-norm pre-normalization output at row {row}: "
            "embedding direction undefined"
        )
    return z / norms


def embed_dataset(model: EmbeddingModel, features: np.ndarray,
                  learner: Optional[int] = None) -> np.ndarray:
    """Forward a whole feature matrix with frozen parameters.

    Honors the DCE_THREADS environment variable (default 1) for read-only
    parallel chunks; the output does not depend on the thread count.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    dim = model.slice_dim if learner is not None else model.embed_dim
    out = np.empty((n, dim))
    bounds = [(lo, min(lo + EMBED_CHUNK, n)) for lo in range(0, n, EMBED_CHUNK)]

    def work(span):
        lo, hi = span
        out[lo:hi] = model.forward(features[lo:hi], learner)

    threads = int(os.environ.get("DCE_THREADS", "1") or 1)
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, bounds))
    else:
        for span in bounds:
            work(span)
    return out


def distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two embedding vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))
