"""Desk-scale fusion encoder producing the feature sequence for the scoring head.

Projected text and image tokens are concatenated, padded or truncated to a
fixed length, given learned positional vectors, and passed through a stack of
pre-norm self-attention encoder blocks (three heads by default). Everything
is plain numpy with hand-written backward passes so gradients can be checked
against finite differences; precomputed backbone features can be ingested
from tensor files instead.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, NonFiniteValues, ShapeMismatch
from .prng import SplitMix64, derive_seed, fnv1a64
from .tensorio import read_tensor

_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
FF_MULT = 2  # feedforward hidden width = FF_MULT * d


@dataclass(frozen=True)
class FusionInput:
    """Text and image token features sharing one embedding width."""

    text_features: np.ndarray   # (L_t, d_in)
    image_features: np.ndarray  # (L_i, d_in)

    def __post_init__(self):
        for name, arr in (("text_features", self.text_features),
                          ("image_features", self.image_features)):
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise ShapeMismatch(f"{name} must be a non-empty 2-D matrix, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteValues(f"{name} contains non-finite entries")
        if self.text_features.shape[1] != self.image_features.shape[1]:
            raise ShapeMismatch(
                f"embedding widths differ: text {self.text_features.shape[1]} "
                f"vs image {self.image_features.shape[1]}")


@dataclass(frozen=True)
class FeatureSequence:
    """Encoded token features consumed by the metric head."""

    ef: np.ndarray  # (L, d)

    def __post_init__(self):
        if self.ef.ndim != 2 or self.ef.shape[0] < 1:
            raise ShapeMismatch(f"feature sequence must be a non-empty 2-D matrix, got {self.ef.shape}")
        if not np.all(np.isfinite(self.ef)):
            raise NonFiniteValues("feature sequence contains non-finite entries")


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 24                  # model width
    L: int = 8                   # output sequence length
    pre_encoder_heads: int = 3
    layers: int = 1
    seed: int = 0
    d_in: int | None = None      # input feature width; defaults to d

    def __post_init__(self):
        if min(self.d, self.L, self.pre_encoder_heads, self.layers) <= 0:
            raise InvalidConfig("d, L, pre_encoder_heads, and layers must all be positive")
        if self.d % self.pre_encoder_heads != 0:
            raise InvalidConfig(
                f"d={self.d} not divisible by pre_encoder_heads={self.pre_encoder_heads}")
        if self.d_in is not None and self.d_in <= 0:
            raise InvalidConfig("d_in must be positive")

    @property
    def input_dim(self) -> int:
        return self.d if self.d_in is None else self.d_in

    @property
    def head_dim(self) -> int:
        return self.d // self.pre_encoder_heads


@dataclass
class EncoderWeights:
    cfg: EncoderConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)


def _layer_param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every tensor, in the fixed init-draw order."""
    d, h = cfg.d, FF_MULT * cfg.d
    shapes: list[tuple[str, tuple[int, ...], int]] = [
        ("text_w", (cfg.input_dim, d), cfg.input_dim),
        ("img_w", (cfg.input_dim, d), cfg.input_dim),
        ("pos", (cfg.L, d), d),
    ]
    for k in range(cfg.layers):
        shapes += [
            (f"l{k}.wq", (d, d), d), (f"l{k}.wk", (d, d), d),
            (f"l{k}.wv", (d, d), d), (f"l{k}.wo", (d, d), d),
            (f"l{k}.w1", (d, h), d), (f"l{k}.w2", (h, d), h),
        ]
    return shapes


def init_encoder(cfg: EncoderConfig, dtype=np.float32) -> EncoderWeights:
    """Deterministic init: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights,
    zero biases, unit layer-norm gains; one splitmix64 stream seeded by cfg.seed."""
    rng = SplitMix64(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, fan_in in _layer_param_shapes(cfg):
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, shape).astype(dtype)
    d = cfg.d
    params["text_b"] = np.zeros(d, dtype=dtype)
    params["img_b"] = np.zeros(d, dtype=dtype)
    for k in range(cfg.layers):
        for nm in ("bq", "bk", "bv", "bo"):
            params[f"l{k}.{nm}"] = np.zeros(d, dtype=dtype)
        params[f"l{k}.b1"] = np.zeros(FF_MULT * d, dtype=dtype)
        params[f"l{k}.b2"] = np.zeros(d, dtype=dtype)
        for nm in ("ln1_g", "ln2_g"):
            params[f"l{k}.{nm}"] = np.ones(d, dtype=dtype)
        for nm in ("ln1_b", "ln2_b"):
            params[f"l{k}.{nm}"] = np.zeros(d, dtype=dtype)
    return EncoderWeights(cfg=cfg, params=params)


# --- primitive layers -------------------------------------------------------

def gelu(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + _GELU_A * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)


def layer_norm_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def attention_forward(x: np.ndarray, wq, bq, wk, bk, wv, bv, wo, bo,
                      n_heads: int, mask: np.ndarray | None = None):
    """Multi-head self-attention sublayer over a (L, d) sequence.

    ``mask`` flags real tokens; padded key positions receive -inf logits so
    no token attends to padding. Returns (output, cache).
    """
    L, d = x.shape
    dh = d // n_heads
    q = x @ wq + bq
    k = x @ wk + bk
    v = x @ wv + bv
    qh = q.reshape(L, n_heads, dh).transpose(1, 0, 2)   # (H, L, dh)
    kh = k.reshape(L, n_heads, dh).transpose(1, 0, 2)
    vh = v.reshape(L, n_heads, dh).transpose(1, 0, 2)
    logits = qh @ kh.transpose(0, 2, 1) / math.sqrt(dh)  # (H, L, L)
    if mask is not None and not mask.all():
        logits = np.where(mask[None, None, :], logits, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)                # (H, L, L), rows sum to 1
    oh = p @ vh                                          # (H, L, dh)
    o = oh.transpose(1, 0, 2).reshape(L, d)
    out = o @ wo + bo
    cache = (x, q, k, v, p, o, wq, wk, wv, wo, n_heads)
    return out, cache


def attention_backward(dout: np.ndarray, cache):
    x, q, k, v, p, o, wq, wk, wv, wo, n_heads = cache
    L, d = x.shape
    dh = d // n_heads
    sqdh = math.sqrt(dh)

    dwo = o.T @ dout
    dbo = dout.sum(axis=0)
    do = dout @ wo.T
    doh = do.reshape(L, n_heads, dh).transpose(1, 0, 2)
    vh = v.reshape(L, n_heads, dh).transpose(1, 0, 2)
    qh = q.reshape(L, n_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(L, n_heads, dh).transpose(1, 0, 2)

    dp = doh @ vh.transpose(0, 2, 1)
    dvh = p.transpose(0, 2, 1) @ doh
    dlogits = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    dqh = dlogits @ kh / sqdh
    dkh = dlogits.transpose(0, 2, 1) @ qh / sqdh

    dq = dqh.transpose(1, 0, 2).reshape(L, d)
    dk = dkh.transpose(1, 0, 2).reshape(L, d)
    dv = dvh.transpose(1, 0, 2).reshape(L, d)
    grads = {
        "wq": x.T @ dq, "bq": dq.sum(axis=0),
        "wk": x.T @ dk, "bk": dk.sum(axis=0),
        "wv": x.T @ dv, "bv": dv.sum(axis=0),
        "wo": dwo, "bo": dbo,
    }
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx, grads


def _block_forward(x, p, k, n_heads, mask):
    a_in, ln1_cache = layer_norm_forward(x, p[f"l{k}.ln1_g"], p[f"l{k}.ln1_b"])
    a_out, att_cache = attention_forward(
        a_in, p[f"l{k}.wq"], p[f"l{k}.bq"], p[f"l{k}.wk"], p[f"l{k}.bk"],
        p[f"l{k}.wv"], p[f"l{k}.bv"], p[f"l{k}.wo"], p[f"l{k}.bo"],
        n_heads, mask)
    x1 = x + a_out
    f_in, ln2_cache = layer_norm_forward(x1, p[f"l{k}.ln2_g"], p[f"l{k}.ln2_b"])
    h_pre = f_in @ p[f"l{k}.w1"] + p[f"l{k}.b1"]
    h = gelu(h_pre)
    f_out = h @ p[f"l{k}.w2"] + p[f"l{k}.b2"]
    x2 = x1 + f_out
    return x2, (ln1_cache, att_cache, ln2_cache, f_in, h_pre, h)


def _block_backward(dx2, p, k, cache, grads):
    ln1_cache, att_cache, ln2_cache, f_in, h_pre, h = cache
    # feedforward path
    grads[f"l{k}.w2"] = h.T @ dx2
    grads[f"l{k}.b2"] = dx2.sum(axis=0)
    dh = dx2 @ p[f"l{k}.w2"].T
    dh_pre = dh * gelu_grad(h_pre)
    grads[f"l{k}.w1"] = f_in.T @ dh_pre
    grads[f"l{k}.b1"] = dh_pre.sum(axis=0)
    df_in = dh_pre @ p[f"l{k}.w1"].T
    dx1_ln, dg2, db2 = layer_norm_backward(df_in, ln2_cache)
    grads[f"l{k}.ln2_g"] = dg2
    grads[f"l{k}.ln2_b"] = db2
    dx1 = dx2 + dx1_ln
    # attention path
    da_in, att_grads = attention_backward(dx1, att_cache)
    for name, g in att_grads.items():
        grads[f"l{k}.{name}"] = g
    dx_ln, dg1, db1 = layer_norm_backward(da_in, ln1_cache)
    grads[f"l{k}.ln1_g"] = dg1
    grads[f"l{k}.ln1_b"] = db1
    return dx1 + dx_ln


def encode_with_cache(w: EncoderWeights, text: np.ndarray, image: np.ndarray):
    """Forward pass returning (ef, cache); cache feeds encode_backward."""
    cfg, p = w.cfg, w.params
    if text.ndim != 2 or image.ndim != 2:
        raise ShapeMismatch("text and image features must be 2-D matrices")
    if text.shape[1] != cfg.input_dim or image.shape[1] != cfg.input_dim:
        raise ShapeMismatch(
            f"input width {text.shape[1]}/{image.shape[1]} does not match "
            f"configured d_in={cfg.input_dim}")
    dtype = p["text_w"].dtype
    text = np.ascontiguousarray(text, dtype=dtype)
    image = np.ascontiguousarray(image, dtype=dtype)

    t_tok = text @ p["text_w"] + p["text_b"]    # (L_t, d)
    i_tok = image @ p["img_w"] + p["img_b"]     # (L_i, d)
    x0 = np.vstack([t_tok, i_tok])
    n_text_used = min(text.shape[0], cfg.L)
    n_real = min(x0.shape[0], cfg.L)
    if x0.shape[0] >= cfg.L:
        x = x0[:cfg.L].copy()
    else:
        x = np.vstack([x0, np.zeros((cfg.L - x0.shape[0], cfg.d), dtype=dtype)])
    mask = np.zeros(cfg.L, dtype=bool)
    mask[:n_real] = True
    x = x + p["pos"]

    block_caches = []
    for k in range(cfg.layers):
        x, cache = _block_forward(x, p, k, cfg.pre_encoder_heads, mask)
        block_caches.append(cache)
    return x, (cfg, text, image, n_text_used, n_real, block_caches)


def encode_backward(w: EncoderWeights, cache, d_ef: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every encoder weight, given dL/dEF."""
    cfg, text, image, n_text_used, n_real, block_caches = cache
    p = w.params
    grads: dict[str, np.ndarray] = {}
    dx = d_ef
    for k in range(cfg.layers - 1, -1, -1):
        dx = _block_backward(dx, p, k, block_caches[k], grads)
    grads["pos"] = dx.copy()
    dx0 = dx[:n_real]
    dt = dx0[:n_text_used]
    di = dx0[n_text_used:]
    n_img_used = di.shape[0]
    grads["text_w"] = text[:n_text_used].T @ dt
    grads["text_b"] = dt.sum(axis=0)
    grads["img_w"] = image[:n_img_used].T @ di
    grads["img_b"] = di.sum(axis=0)
    # unused (truncated) input tokens contribute nothing
    return grads


def encode(w: EncoderWeights, x: FusionInput) -> FeatureSequence:
    ef, _ = encode_with_cache(w, x.text_features, x.image_features)
    return FeatureSequence(ef=ef)


# --- text featurizer --------------------------------------------------------

def embed_text(text: str, d_in: int) -> np.ndarray:
    """Deterministic hash embeddings: one pseudo-random unit-RMS vector per
    whitespace token (casefolded, edge punctuation stripped). Stands in for a
    learned tokenizer so prompt text can flow through the fusion encoder."""
    if d_in <= 0:
        raise InvalidConfig("d_in must be positive")
    tokens = [t.strip(string.punctuation) for t in text.casefold().split()]
    tokens = [t for t in tokens if t]
    if not tokens:
        raise InvalidConfig(f"text {text!r} produced no tokens")
    bound = math.sqrt(3.0 / d_in)  # unit RMS per vector
    rows = np.empty((len(tokens), d_in), dtype=np.float64)
    for i, tok in enumerate(tokens):
        rng = SplitMix64(derive_seed(fnv1a64(tok.encode("utf-8")), "token-embed"))
        rows[i] = rng.uniform(-bound, bound, (d_in,))
    return rows


def ingest_features(path) -> FeatureSequence:
    """Load externally precomputed features from a tensor file, unchanged."""
    arr = read_tensor(path)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{path}: feature tensor must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValues(f"{path}: feature tensor contains non-finite values")
    return FeatureSequence(ef=arr)
