"""Full scoring pipeline: fusion encoder feeding the cross-metric head.

Owns the flat parameter-dict view used by the optimizer and checkpoints,
plus the glue that turns a manifest record (prompt text + feature payload)
into model inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metric_head
from .dataset import SampleRecord
from .encoder import (
    EncoderConfig,
    EncoderWeights,
    embed_text,
    encode_backward,
    encode_with_cache,
    ingest_features,
    init_encoder,
)
from .errors import NonFiniteValues, ShapeMismatch
from .prng import derive_seed

_HEAD_KEYS = ("w_q", "w_k", "w_v", "r", "b")


@dataclass
class Model:
    encoder: EncoderWeights
    head: metric_head.MetricProjectionSet
    metric_names: tuple[str, ...]

    def predict(self, record: SampleRecord, base_dir: Path | None = None) -> np.ndarray:
        text, image = record_features(record, self.encoder.cfg.input_dim, base_dir)
        scores, _ = forward(self, text, image)
        return scores

    def score_features(self, text: np.ndarray, image: np.ndarray) -> np.ndarray:
        scores, _ = forward(self, text, image)
        return scores


def build_model(cfg: EncoderConfig, metric_names: tuple[str, ...], seed: int,
                d_k: int | None = None, d_v: int | None = None,
                dtype=np.float32) -> Model:
    """Fresh model; encoder and head draw from independent derived streams."""
    enc = init_encoder(cfg, dtype=dtype)
    head = metric_head.init_metric_head(
        cfg.d, len(metric_names), seed=derive_seed(seed, "metric-head"),
        d_k=d_k, d_v=d_v, dtype=dtype)
    return Model(encoder=enc, head=head, metric_names=tuple(metric_names))


def forward(model: Model, text: np.ndarray, image: np.ndarray):
    ef, enc_cache = encode_with_cache(model.encoder, text, image)
    scores, head_cache = metric_head.scores_with_cache(ef, model.head)
    return scores, (enc_cache, head_cache)


def backward(model: Model, cache, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Flat gradient dict for d(sum_i upstream_i * s_i)/d(every parameter)."""
    enc_cache, head_cache = cache
    head_grads, d_ef = metric_head.head_backward(model.head, head_cache, upstream)
    enc_grads = encode_backward(model.encoder, enc_cache, d_ef)
    flat = {f"enc.{name}": g for name, g in enc_grads.items()}
    flat.update({f"head.{name}": head_grads[name] for name in _HEAD_KEYS})
    return flat


def flat_params(model: Model) -> dict[str, np.ndarray]:
    """Live references to every trainable tensor; in-place updates train the model."""
    out = {f"enc.{name}": arr for name, arr in model.encoder.params.items()}
    for name in _HEAD_KEYS:
        out[f"head.{name}"] = getattr(model.head, name)
    return out


def set_flat_params(model: Model, tensors: dict[str, np.ndarray]) -> None:
    for name, arr in tensors.items():
        if name.startswith("enc."):
            model.encoder.params[name[4:]] = arr
        elif name.startswith("head."):
            setattr(model.head, name[5:], arr)
        else:
            raise ShapeMismatch(f"unknown parameter name {name!r}")


def copy_model(model: Model) -> Model:
    enc = EncoderWeights(cfg=model.encoder.cfg,
                         params={k: v.copy() for k, v in model.encoder.params.items()})
    head = metric_head.MetricProjectionSet(
        w_q=model.head.w_q.copy(), w_k=model.head.w_k.copy(),
        w_v=model.head.w_v.copy(), r=model.head.r.copy(), b=model.head.b.copy())
    return Model(encoder=enc, head=head, metric_names=model.metric_names)


def record_features(record: SampleRecord, d_in: int,
                    base_dir: Path | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Resolve a record into (text_features, image_features) matrices."""
    text = embed_text(record.prompt_text, d_in)
    ref = record.feature_ref
    if isinstance(ref, str):
        path = Path(ref)
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        image = ingest_features(path).ef.astype(np.float64)
    else:
        image = np.asarray(ref, dtype=np.float64)
        if image.ndim != 2:
            raise ShapeMismatch(
                f"inline feature_ref for {record.sample_id!r} must be a 2-D matrix")
        if not np.all(np.isfinite(image)):
            raise NonFiniteValues(
                f"inline feature_ref for {record.sample_id!r} has non-finite values")
    return text, image
