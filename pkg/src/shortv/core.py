"""Numeric kernels: matmul with FLOP accounting, softmax, RMS norm, KL, cosine.

All public kernels take and return float32 arrays. Reductions are carried out
in float64 and rounded once, which makes every output row depend only on the
matching input row. The engine relies on that for bit-exact comparisons
between dense and sparse executions of the same layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError

F32 = np.float32
F64 = np.float64


@dataclass
class FlopCounter:
    """Accumulates multiply-accumulate work as ``2*m*n*k`` per product.

    ``by_layer`` is filled when a layer index is supplied to the kernels.
    Counters are never shared between workers; combine them with :meth:`merge`.
    """

    total: int = 0
    by_layer: dict[int, int] = field(default_factory=dict)

    def add(self, flops: int, layer: int | None = None) -> None:
        flops = int(flops)
        if flops < 0:
            raise ValueError("FLOP increments must be non-negative")
        self.total += flops
        if layer is not None:
            self.by_layer[layer] = self.by_layer.get(layer, 0) + flops

    def merge(self, other: "FlopCounter") -> "FlopCounter":
        out = FlopCounter(self.total + other.total, dict(self.by_layer))
        for k, v in other.by_layer.items():
            out.by_layer[k] = out.by_layer.get(k, 0) + v
        return out


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=F32)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    return x


def as_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=F32)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {x.shape}")
    return x


def matmul(a, b, counter: FlopCounter | None = None, layer: int | None = None) -> np.ndarray:
    """Matrix product ``a @ b``; charges ``2*a.rows*b.cols*a.cols`` to ``counter``."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if counter is not None:
        counter.add(2 * a.shape[0] * b.shape[1] * a.shape[1], layer)
    return (a.astype(F64) @ b.astype(F64)).astype(F32)


def batched_matmul(a, b, counter: FlopCounter | None = None, layer: int | None = None) -> np.ndarray:
    """Stacked product over a leading batch axis (one product per head).

    Inputs may be float64; the result stays float64 because it feeds softmax.
    """
    a = np.asarray(a, dtype=F64)
    b = np.asarray(b, dtype=F64)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"batched_matmul: {a.shape} @ {b.shape}")
    if counter is not None:
        counter.add(2 * a.shape[0] * a.shape[1] * b.shape[2] * a.shape[2], layer)
    return a @ b


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax. Returns float64 so callers can keep precision."""
    x = np.asarray(logits, dtype=F64)
    if x.size == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    m = np.max(x, axis=axis, keepdims=True)
    # fully masked rows (all -inf) never occur: every query sees itself
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=F64)
    if x.ndim != 1 or x.size == 0:
        raise ShapeError("log_softmax expects a non-empty vector")
    m = np.max(x)
    return x - m - np.log(np.sum(np.exp(x - m)))


def kl_divergence(p_logits, q_logits) -> float:
    """KL(softmax(p) || softmax(q)) in nats. ``p`` is the reference distribution."""
    p_logits = np.asarray(p_logits, dtype=F64)
    q_logits = np.asarray(q_logits, dtype=F64)
    if p_logits.shape != q_logits.shape or p_logits.ndim != 1:
        raise ShapeError(f"kl_divergence: shapes {p_logits.shape} vs {q_logits.shape}")
    lp = log_softmax(p_logits)
    lq = log_softmax(q_logits)
    return float(np.sum(np.exp(lp) * (lp - lq)))


def rms_norm(x, gamma, eps: float) -> np.ndarray:
    """Row-wise ``x * gamma / sqrt(mean(x**2) + eps)``; accepts a vector or a matrix."""
    x = np.asarray(x, dtype=F32)
    gamma = as_vector(gamma)
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"rms_norm: x has width {x.shape[-1]}, gamma {gamma.shape[0]}")
    x64 = x.astype(F64)
    scale = 1.0 / np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    return (x64 * scale * gamma.astype(F64)).astype(F32)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=F64).ravel()
    b = np.asarray(b, dtype=F64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: lengths {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def silu(x) -> np.ndarray:
    x = np.asarray(x, dtype=F64)
    return x / (1.0 + np.exp(-x))
