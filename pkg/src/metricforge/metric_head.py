"""Cross-metric attention scoring head.

Replaces a single-score MLP readout: each metric owns query/key/value
projections of the shared feature sequence, and a metric's score attends
over every metric's keys and values, summing the attended blocks before a
mean-pool and a per-metric linear readout. The cross terms are the point:
metric i's score sees metric j's representation for all j.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    IndexOutOfRange,
    InvalidConfig,
    NonFiniteValues,
    ShapeMismatch,
)
from .prng import SplitMix64


@dataclass
class MetricProjectionSet:
    """Stacked per-metric projections plus the pooled linear readout."""

    w_q: np.ndarray  # (M, d, d_k)
    w_k: np.ndarray  # (M, d, d_k)
    w_v: np.ndarray  # (M, d, d_v)
    r: np.ndarray    # (M, d_v) readout weights
    b: np.ndarray    # (M,)     readout biases

    @property
    def n_metrics(self) -> int:
        return self.w_q.shape[0]

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[2]

    @property
    def d_v(self) -> int:
        return self.w_v.shape[2]


@dataclass(frozen=True)
class MetricScores:
    s: np.ndarray  # (M,)

    def __post_init__(self):
        if self.s.ndim != 1:
            raise ShapeMismatch(f"scores must be a vector, got shape {self.s.shape}")
        if not np.all(np.isfinite(self.s)):
            raise NonFiniteValues("scores contain non-finite values")


def init_metric_head(d: int, n_metrics: int, seed: int,
                     d_k: int | None = None, d_v: int | None = None,
                     dtype=np.float32) -> MetricProjectionSet:
    """Deterministic init. Defaults split the model width across metrics
    (d_k = d_v = d / M), mirroring multi-head width splitting."""
    if d <= 0 or n_metrics <= 0:
        raise InvalidConfig("d and n_metrics must be positive")
    if d_k is None or d_v is None:
        if d % n_metrics != 0:
            raise InvalidConfig(
                f"d={d} not divisible by n_metrics={n_metrics}; pass d_k/d_v explicitly")
        d_k = d_k if d_k is not None else d // n_metrics
        d_v = d_v if d_v is not None else d // n_metrics
    if d_k <= 0 or d_v <= 0:
        raise InvalidConfig("d_k and d_v must be positive")
    rng = SplitMix64(seed)
    wb = 1.0 / math.sqrt(d)
    rb = 1.0 / math.sqrt(d_v)
    w_q = np.empty((n_metrics, d, d_k), dtype=dtype)
    w_k = np.empty((n_metrics, d, d_k), dtype=dtype)
    w_v = np.empty((n_metrics, d, d_v), dtype=dtype)
    r = np.empty((n_metrics, d_v), dtype=dtype)
    for i in range(n_metrics):
        w_q[i] = rng.uniform(-wb, wb, (d, d_k))
        w_k[i] = rng.uniform(-wb, wb, (d, d_k))
        w_v[i] = rng.uniform(-wb, wb, (d, d_v))
        r[i] = rng.uniform(-rb, rb, (d_v,))
    return MetricProjectionSet(w_q=w_q, w_k=w_k, w_v=w_v, r=r,
                               b=np.zeros(n_metrics, dtype=dtype))


def row_softmax(logits: np.ndarray) -> np.ndarray:
    """Stabilized softmax along the last axis; rows sum to 1."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteValues("softmax input contains non-finite values")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def project(ef, p: MetricProjectionSet, i: int):
    """Q_i = EF W_Q_i, K_i = EF W_K_i, V_i = EF W_V_i (linear, no bias)."""
    ef = _as_ef(ef)
    if not (0 <= i < p.n_metrics):
        raise IndexOutOfRange(f"metric index {i} outside [0, {p.n_metrics})")
    if ef.shape[1] != p.d:
        raise ShapeMismatch(f"feature width {ef.shape[1]} != projection input width {p.d}")
    return ef @ p.w_q[i], ef @ p.w_k[i], ef @ p.w_v[i]


def _as_ef(ef) -> np.ndarray:
    arr = ef.ef if hasattr(ef, "ef") else np.asarray(ef)
    if arr.ndim != 2:
        raise ShapeMismatch(f"feature sequence must be 2-D, got shape {arr.shape}")
    return arr


def scores_with_cache(ef, p: MetricProjectionSet):
    """Forward pass returning (scores (M,), cache for head_backward)."""
    ef = _as_ef(ef)
    m, L = p.n_metrics, ef.shape[0]
    if ef.shape[1] != p.d:
        raise ShapeMismatch(f"feature width {ef.shape[1]} != projection input width {p.d}")
    scale = 1.0 / math.sqrt(p.d_k)
    q = np.einsum("ld,mdk->mlk", ef, p.w_q)  # (M, L, d_k)
    k = np.einsum("ld,mdk->mlk", ef, p.w_k)
    v = np.einsum("ld,mdv->mlv", ef, p.w_v)  # (M, L, d_v)
    # logits[i, j] = Q_i K_j^T / sqrt(d_k)
    logits = np.einsum("ilk,jnk->ijln", q, k) * scale  # (M, M, L, L)
    probs = row_softmax(logits)
    attended = np.einsum("ijln,jnv->ijlv", probs, v)   # (M, M, L, d_v)
    summed = attended.sum(axis=1)                      # (M, L, d_v)
    pooled = summed.mean(axis=1)                       # (M, d_v)
    s = np.einsum("mv,mv->m", pooled, p.r) + p.b
    cache = (ef, q, k, v, probs, pooled, scale, L)
    return s, cache


def cross_metric_scores(ef, p: MetricProjectionSet) -> MetricScores:
    s, _ = scores_with_cache(ef, p)
    return MetricScores(s=s)


def head_backward(p: MetricProjectionSet, cache, upstream: np.ndarray):
    """Gradients of sum_i upstream_i * s_i w.r.t. head weights and EF."""
    ef, q, k, v, probs, pooled, scale, L = cache
    upstream = np.asarray(upstream, dtype=ef.dtype)
    if upstream.shape != (p.n_metrics,):
        raise ShapeMismatch(
            f"upstream must have shape ({p.n_metrics},), got {upstream.shape}")

    d_r = upstream[:, None] * pooled                    # (M, d_v)
    d_b = upstream.copy()
    d_pooled = upstream[:, None] * p.r                  # (M, d_v)
    d_summed_row = d_pooled / L                         # every token row gets 1/L
    # dA[i, j] = d_summed_row[i] for all j (outer sum over j)
    d_attended = np.broadcast_to(
        d_summed_row[:, None, None, :], probs.shape[:3] + (p.d_v,))
    d_probs = np.einsum("ijlv,jnv->ijln", d_attended, v)
    d_v_heads = np.einsum("ijln,ijlv->jnv", probs, d_attended)
    inner = (d_probs * probs).sum(axis=-1, keepdims=True)
    d_logits = probs * (d_probs - inner)
    d_q = np.einsum("ijln,jnk->ilk", d_logits, k) * scale
    d_k = np.einsum("ijln,ilk->jnk", d_logits, q) * scale

    d_w_q = np.einsum("ld,mlk->mdk", ef, d_q)
    d_w_k = np.einsum("ld,mlk->mdk", ef, d_k)
    d_w_v = np.einsum("ld,mlv->mdv", ef, d_v_heads)
    d_ef = (np.einsum("mlk,mdk->ld", d_q, p.w_q)
            + np.einsum("mlk,mdk->ld", d_k, p.w_k)
            + np.einsum("mlv,mdv->ld", d_v_heads, p.w_v))
    grads = {"w_q": d_w_q, "w_k": d_w_k, "w_v": d_w_v, "r": d_r, "b": d_b}
    return grads, d_ef


def head_gradients(ef, p: MetricProjectionSet, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Analytic gradients of sum_i upstream_i * s_i; includes d/dEF as "ef"."""
    _, cache = scores_with_cache(ef, p)
    grads, d_ef = head_backward(p, cache, np.asarray(upstream))
    grads["ef"] = d_ef
    return grads
