"""End-to-end training: Adam optimization, per-step dynamic loss weighting,
two-stage retraining, and checkpoint persistence.

The loss is mean squared error on normalized scores. In dynamic mode the
per-metric weights form a simplex that is renormalized once per step by the
current per-metric losses, shifting weight toward whichever metric is doing
worst. Checkpoints are directories: an index.json plus one tensor file per
parameter and optimizer slot, checksummed for corruption detection.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pipeline
from .dataset import Manifest, manifest_fingerprint
from .encoder import EncoderConfig, EncoderWeights
from .errors import (
    BatchTooLarge,
    CorruptCheckpoint,
    DegenerateDenominator,
    EmptyManifest,
    EmptySelection,
    InvalidConfig,
    IoFailure,
    LengthMismatch,
    MetricForgeError,
    NonPositiveLoss,
    ChecksumMismatch,
    TrainingFailure,
    VersionMismatch,
)
from .metric_head import MetricProjectionSet
from .prng import SplitMix64, derive_seed
from .tensorio import file_sha256, read_tensor, write_tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HyperParams:
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 5e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.batch_size <= 0:
            raise InvalidConfig("batch_size must be positive")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise InvalidConfig("learning_rate and adam_eps must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not (0.0 < b < 1.0):
                raise InvalidConfig("adam betas must lie in (0, 1)")
        if self.seed < 0:
            raise InvalidConfig("seed must be non-negative")


# Published fine-tuning recipes keep Adam at (0.9, 0.999, 1e-8), batch 32,
# lr 5e-6; the 10- and 50-epoch variants target a large pretrained backbone.
# The desk preset trains this package's small from-scratch model instead, so
# it runs more epochs at a learning rate sized for randomly-initialized
# weights.
HYPERPARAM_PRESETS: dict[str, HyperParams] = {
    "backbone-short": HyperParams(epochs=10, batch_size=32, learning_rate=5e-6),
    "backbone-long": HyperParams(epochs=50, batch_size=32, learning_rate=5e-6),
    "desk": HyperParams(epochs=150, batch_size=16, learning_rate=2e-2),
}


@dataclass(frozen=True)
class LossWeights:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        object.__setattr__(self, "alpha", a)
        if a.ndim != 1 or a.size == 0:
            raise InvalidConfig("alpha must be a non-empty vector")
        if np.any(a < 0):
            raise InvalidConfig("alpha entries must be non-negative")
        if abs(float(a.sum()) - 1.0) > 1e-9:
            raise InvalidConfig(f"alpha must sum to 1 within 1e-9, got {a.sum()!r}")


@dataclass(frozen=True)
class TaskSelector:
    active_metrics: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "active_metrics", tuple(self.active_metrics))
        if not self.active_metrics:
            raise EmptySelection("selector must name at least one metric")
        if len(set(self.active_metrics)) != len(self.active_metrics):
            raise InvalidConfig("selector repeats a metric")

    def indices(self, metric_names: tuple[str, ...]) -> list[int]:
        missing = [m for m in self.active_metrics if m not in metric_names]
        if missing:
            raise InvalidConfig(f"selector names unknown metrics: {missing}")
        return [metric_names.index(m) for m in self.active_metrics]


@dataclass
class Checkpoint:
    model: pipeline.Model
    optimizer_state: dict
    hyperparams: HyperParams
    metric_names: tuple[str, ...]
    history: list[dict]
    provenance: dict
    version: int = CHECKPOINT_VERSION


# --- loss pieces -------------------------------------------------------------

def mse_loss(pred: np.ndarray, target: np.ndarray,
             sel: TaskSelector | None = None,
             metric_names: tuple[str, ...] | None = None):
    """Batch MSE per metric plus the unweighted mean over selected metrics.

    ``pred`` and ``target`` are (batch, M) or (M,) arrays. Returns
    (total, per_metric) where per_metric covers every metric column.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise LengthMismatch(f"pred shape {pred.shape} != target shape {target.shape}")
    per_metric = ((pred - target) ** 2).mean(axis=0)
    if sel is None:
        idx = list(range(per_metric.size))
    else:
        if metric_names is None:
            raise InvalidConfig("metric_names required when a selector is given")
        idx = sel.indices(tuple(metric_names))
    if not idx:
        raise EmptySelection("no metrics selected")
    total = float(per_metric[idx].mean())
    return total, per_metric


def dynamic_weight_update(prev: LossWeights | np.ndarray, losses: np.ndarray) -> LossWeights:
    """alpha'_i = prev_i * loss_i / sum_j prev_j * loss_j."""
    alpha = prev.alpha if isinstance(prev, LossWeights) else LossWeights(np.asarray(prev)).alpha
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != alpha.shape:
        raise LengthMismatch(f"losses shape {losses.shape} != alpha shape {alpha.shape}")
    if np.any(losses <= 0) or not np.all(np.isfinite(losses)):
        raise NonPositiveLoss("dynamic weighting needs strictly positive finite losses")
    weighted = alpha * losses
    denom = float(weighted.sum())
    if denom == 0.0:
        raise DegenerateDenominator("all weighted losses are zero")
    return LossWeights(weighted / denom)


def weighted_total_loss(per_metric: np.ndarray, w: LossWeights | np.ndarray) -> float:
    alpha = w.alpha if isinstance(w, LossWeights) else np.asarray(w, dtype=np.float64)
    per_metric = np.asarray(per_metric, dtype=np.float64)
    if per_metric.shape != alpha.shape:
        raise LengthMismatch(
            f"per_metric shape {per_metric.shape} != weights shape {alpha.shape}")
    return float(alpha @ per_metric)


def random_simplex(n: int, seed: int) -> LossWeights:
    rng = SplitMix64(seed)
    u = np.array([rng.next_float() + 1e-9 for _ in range(n)])
    return LossWeights(u / u.sum())


# --- optimizer ---------------------------------------------------------------

class Adam:
    """Standard bias-corrected Adam over a flat dict of parameter tensors."""

    def __init__(self, hp: HyperParams, state: dict | None = None):
        self.hp = hp
        if state is None:
            state = {"step": 0, "m": {}, "v": {}}
        self.state = state

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        hp = self.hp
        self.state["step"] += 1
        t = self.state["step"]
        bc1 = 1.0 - hp.adam_beta1 ** t
        bc2 = 1.0 - hp.adam_beta2 ** t
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            m = self.state["m"].get(name)
            if m is None:
                m = np.zeros_like(p)
                self.state["m"][name] = m
            v = self.state["v"].get(name)
            if v is None:
                v = np.zeros_like(p)
                self.state["v"][name] = v
            m *= hp.adam_beta1
            m += (1.0 - hp.adam_beta1) * g
            v *= hp.adam_beta2
            v += (1.0 - hp.adam_beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p -= (hp.learning_rate * m_hat / (np.sqrt(v_hat) + hp.adam_eps)).astype(p.dtype)


# --- training loop -----------------------------------------------------------

def _require_normalized(manifest: Manifest) -> None:
    for name, (lo, hi) in manifest.score_range.items():
        if (lo, hi) != (0.0, 1.0):
            raise InvalidConfig(
                f"fit expects a normalized manifest; metric {name!r} has range "
                f"[{lo}, {hi}] (run normalize_scores first)")


def fit(train: Manifest, hp: HyperParams,
        selector: TaskSelector | None = None,
        weighting: str = "static",
        encoder_cfg: EncoderConfig | None = None,
        init_model: pipeline.Model | None = None,
        freeze_encoder: bool = False,
        provenance_stages: list[list[str]] | None = None) -> Checkpoint:
    """Train encoder + head on a normalized manifest; deterministic per seed.

    Batches are consecutive chunks of a per-epoch splitmix64 shuffle. In
    dynamic mode the loss weights are renormalized by that step's per-metric
    losses before the gradient step.
    """
    if weighting not in ("static", "dynamic"):
        raise InvalidConfig(f"weighting must be 'static' or 'dynamic', got {weighting!r}")
    if len(train) == 0:
        raise EmptyManifest("training manifest has no records")
    _require_normalized(train)
    if hp.batch_size > len(train):
        raise BatchTooLarge(
            f"batch_size {hp.batch_size} exceeds record count {len(train)}")

    metric_names = train.metric_names
    sel = selector if selector is not None else TaskSelector(metric_names)
    sel_idx = sel.indices(metric_names)

    if init_model is not None:
        model = init_model
        if tuple(model.metric_names) != tuple(metric_names):
            raise InvalidConfig(
                f"model metrics {model.metric_names} != manifest metrics {metric_names}")
    else:
        if encoder_cfg is None:
            raise InvalidConfig("encoder_cfg required when training from scratch")
        # seed 0 means "derive the encoder stream from the training seed"
        cfg = encoder_cfg if encoder_cfg.seed else dataclasses.replace(
            encoder_cfg, seed=derive_seed(hp.seed, "encoder"))
        model = pipeline.build_model(cfg, metric_names, seed=hp.seed)

    d_in = model.encoder.cfg.input_dim
    features = [pipeline.record_features(rec, d_in, train.base_dir) for rec in train.records]
    dtype = model.encoder.params["text_w"].dtype
    features = [(t.astype(dtype), im.astype(dtype)) for t, im in features]
    targets = np.array([[rec.mos[m] for m in metric_names] for rec in train.records],
                       dtype=np.float64)

    params = pipeline.flat_params(model)
    trainable = {k: v for k, v in params.items()
                 if not (freeze_encoder and k.startswith("enc."))}
    adam = Adam(hp)

    n_sel = len(sel_idx)
    if weighting == "dynamic":
        alpha = random_simplex(n_sel, derive_seed(hp.seed, "alpha-init"))
    else:
        alpha = LossWeights(np.full(n_sel, 1.0 / n_sel))

    n = len(train)
    history: list[dict] = []
    for epoch in range(hp.epochs):
        order = list(range(n))
        SplitMix64(derive_seed(hp.seed, f"shuffle-epoch-{epoch}")).shuffle(order)
        loss_sums = np.zeros(len(metric_names), dtype=np.float64)
        n_batches = 0
        try:
            for start in range(0, n, hp.batch_size):
                batch = order[start:start + hp.batch_size]
                bsz = len(batch)
                scores = np.empty((bsz, len(metric_names)), dtype=np.float64)
                caches = []
                for row, idx in enumerate(batch):
                    text, image = features[idx]
                    s, cache = pipeline.forward(model, text, image)
                    scores[row] = s
                    caches.append(cache)
                _, per_metric = mse_loss(scores, targets[batch])
                if weighting == "dynamic":
                    alpha = dynamic_weight_update(alpha, per_metric[sel_idx])
                weights = np.zeros(len(metric_names))
                weights[sel_idx] = alpha.alpha
                grads: dict[str, np.ndarray] = {}
                for row, idx in enumerate(batch):
                    upstream = (weights * 2.0 * (scores[row] - targets[idx]) / bsz).astype(dtype)
                    g = pipeline.backward(model, caches[row], upstream)
                    for name, arr in g.items():
                        if name in trainable:
                            acc = grads.get(name)
                            if acc is None:
                                grads[name] = arr.astype(dtype, copy=True)
                            else:
                                acc += arr
                adam.step(trainable, grads)
                loss_sums += per_metric
                n_batches += 1
        except MetricForgeError as exc:
            # inputs validated clean, so this is a mid-run failure (exploding
            # weights, a metric loss collapsing to zero in dynamic mode, ...)
            raise TrainingFailure(f"epoch {epoch}: {exc}") from exc
        epoch_losses = loss_sums / max(n_batches, 1)
        history.append({
            "epoch": epoch,
            "loss": {name: float(epoch_losses[i]) for i, name in enumerate(metric_names)},
            "alpha": {name: float(alpha.alpha[j])
                      for j, name in enumerate(sel.active_metrics)},
        })

    stages = list(provenance_stages or []) + [list(sel.active_metrics)]
    provenance = {
        "seed": hp.seed,
        "dataset_fingerprint": manifest_fingerprint(train),
        "stages": stages,
        "weighting": weighting,
        "freeze_encoder": freeze_encoder,
    }
    return Checkpoint(model=model, optimizer_state=adam.state, hyperparams=hp,
                      metric_names=metric_names, history=history, provenance=provenance)


def second_training(ckpt: Checkpoint, train: Manifest, hp: HyperParams,
                    new_sel: TaskSelector,
                    weighting: str = "static",
                    freeze_encoder: bool = False) -> Checkpoint:
    """Continue from a checkpoint's weights on a new task selection.

    Weights transfer; optimizer state is reset. The provenance stage chain
    records every selector the model has been trained on, in order.
    """
    if ckpt.version != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"checkpoint version {ckpt.version} != supported {CHECKPOINT_VERSION}")
    prev_stages = ckpt.provenance.get("stages", [])
    if prev_stages and set(prev_stages[-1]) == set(new_sel.active_metrics):
        warnings.warn("second training repeats the previous task selection",
                      stacklevel=2)
    model = pipeline.copy_model(ckpt.model)
    return fit(train, hp, selector=new_sel, weighting=weighting,
               init_model=model, freeze_encoder=freeze_encoder,
               provenance_stages=[list(s) for s in prev_stages])


# --- persistence -------------------------------------------------------------

def _checkpoint_tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    tensors = {f"model/{k}": v for k, v in pipeline.flat_params(ckpt.model).items()}
    for slot in ("m", "v"):
        for name, arr in ckpt.optimizer_state.get(slot, {}).items():
            tensors[f"opt.{slot}/{name}"] = arr
    return tensors


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> None:
    """Write a checkpoint directory; index.json is written last so a partial
    directory is detectable as corrupt."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create checkpoint dir {directory}: {exc}") from exc
    tensors = _checkpoint_tensors(ckpt)
    index_tensors = {}
    for i, name in enumerate(sorted(tensors)):
        fname = f"t{i:04d}.mft"
        info = write_tensor(directory / fname, tensors[name])
        index_tensors[name] = {
            "file": fname,
            "shape": info["shape"],
            "dtype": info["dtype"],
            "offset": info["offset"],
            "nbytes": info["nbytes"],
            "sha256": file_sha256(directory / fname),
        }
    index = {
        "version": ckpt.version,
        "hyperparams": dataclasses.asdict(ckpt.hyperparams),
        "metric_names": list(ckpt.metric_names),
        "history": ckpt.history,
        "provenance": ckpt.provenance,
        "encoder_config": {
            "d": ckpt.model.encoder.cfg.d,
            "L": ckpt.model.encoder.cfg.L,
            "pre_encoder_heads": ckpt.model.encoder.cfg.pre_encoder_heads,
            "layers": ckpt.model.encoder.cfg.layers,
            "seed": ckpt.model.encoder.cfg.seed,
            "d_in": ckpt.model.encoder.cfg.input_dim,
        },
        "head_config": {
            "d_k": ckpt.model.head.d_k,
            "d_v": ckpt.model.head.d_v,
        },
        "optimizer": {"step": ckpt.optimizer_state.get("step", 0)},
        "tensors": index_tensors,
    }
    try:
        with open(directory / "index.json", "w", encoding="utf-8") as fh:
            json.dump(index, fh, indent=1)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint index in {directory}: {exc}") from exc


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise CorruptCheckpoint(f"{directory}: missing index.json")
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{directory}: unreadable index.json: {exc}") from exc
    version = index.get("version")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"checkpoint version {version!r} != supported {CHECKPOINT_VERSION}")
    for key in ("hyperparams", "metric_names", "encoder_config", "head_config", "tensors"):
        if key not in index:
            raise CorruptCheckpoint(f"{directory}: index.json missing {key!r}")

    tensors: dict[str, np.ndarray] = {}
    for name, meta in index["tensors"].items():
        path = directory / meta["file"]
        if not path.exists():
            raise CorruptCheckpoint(f"{directory}: missing tensor file {meta['file']}")
        if file_sha256(path) != meta["sha256"]:
            raise ChecksumMismatch(f"{directory}: checksum mismatch for {meta['file']}")
        arr = read_tensor(path)
        if list(arr.shape) != list(meta["shape"]):
            raise CorruptCheckpoint(
                f"{directory}: tensor {name!r} has shape {arr.shape}, "
                f"index says {meta['shape']}")
        tensors[name] = arr

    ecfg = index["encoder_config"]
    cfg = EncoderConfig(d=ecfg["d"], L=ecfg["L"],
                        pre_encoder_heads=ecfg["pre_encoder_heads"],
                        layers=ecfg["layers"], seed=ecfg["seed"], d_in=ecfg["d_in"])
    metric_names = tuple(index["metric_names"])
    model_tensors = {k[len("model/"):]: v for k, v in tensors.items()
                     if k.startswith("model/")}
    try:
        enc_params = {k[4:]: v for k, v in model_tensors.items() if k.startswith("enc.")}
        head = MetricProjectionSet(
            w_q=model_tensors["head.w_q"], w_k=model_tensors["head.w_k"],
            w_v=model_tensors["head.w_v"], r=model_tensors["head.r"],
            b=model_tensors["head.b"])
    except KeyError as exc:
        raise CorruptCheckpoint(f"{directory}: missing model tensor {exc}") from exc
    model = pipeline.Model(encoder=EncoderWeights(cfg=cfg, params=enc_params),
                           head=head, metric_names=metric_names)
    opt_state = {
        "step": index.get("optimizer", {}).get("step", 0),
        "m": {k[len("opt.m/"):]: v for k, v in tensors.items() if k.startswith("opt.m/")},
        "v": {k[len("opt.v/"):]: v for k, v in tensors.items() if k.startswith("opt.v/")},
    }
    hp = HyperParams(**index["hyperparams"])
    return Checkpoint(model=model, optimizer_state=opt_state, hyperparams=hp,
                      metric_names=metric_names, history=index.get("history", []),
                      provenance=index.get("provenance", {}), version=version)


def write_history_csv(history: list[dict], metric_names: tuple[str, ...],
                      path: str | Path) -> None:
    """Loss-history CSV: one row per epoch, loss and weight columns per metric."""
    fields = (["epoch"] + [f"loss_{m}" for m in metric_names]
              + [f"alpha_{m}" for m in metric_names])
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for entry in history:
                row = {"epoch": entry["epoch"]}
                for m in metric_names:
                    row[f"loss_{m}"] = f"{entry['loss'][m]:.10g}"
                    row[f"alpha_{m}"] = f"{entry['alpha'].get(m, 0.0):.10g}"
                writer.writerow(row)
    except OSError as exc:
        raise IoFailure(f"cannot write history CSV {path}: {exc}") from exc
