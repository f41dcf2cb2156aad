"""Correlation metrics, prompt-template scoring, and sub-metric ratios.

PLCC is the Pearson correlation between predictions and normalized scores;
SRCC is the Pearson correlation of average ranks (ties get the mean of their
rank span). Prompt-template scoring rates a single concept by running a fixed
concept prompt ("very authentic image", ...) together with the image features
through the model and reading out the matching score. The sub-metric report
attributes a parent score to child concepts by inverse-gap ratios.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .dataset import Manifest, normalize_scores
from .errors import (
    EmptyManifest,
    LengthMismatch,
    MetricNameMismatch,
    NonPositiveGap,
    UnknownTemplate,
    ZeroVariance,
)
from .pipeline import Model


# --- rank correlation --------------------------------------------------------

def _as_vector(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(a)):
        raise ZeroVariance(f"{name} contains non-finite values")
    return a


def rankdata(x) -> np.ndarray:
    """1-based ranks; tied values share the average of their rank span."""
    a = _as_vector(x, "ranks input")
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size, dtype=np.float64)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def plcc(x, y) -> float:
    """Pearson linear correlation coefficient, clamped into [-1, 1]."""
    a = _as_vector(x, "x")
    b = _as_vector(y, "y")
    if a.size != b.size:
        raise LengthMismatch(f"length {a.size} != {b.size}")
    if a.size < 2:
        raise LengthMismatch("need at least 2 points")
    a = a - a.mean()
    b = b - b.mean()
    denom_sq = np.sum(a * a) * np.sum(b * b)
    if denom_sq <= 0.0:
        raise ZeroVariance("an argument has zero variance")
    r = float(np.sum(a * b) / np.sqrt(denom_sq))
    return min(1.0, max(-1.0, r))


def srcc(x, y) -> float:
    """Spearman rank correlation: PLCC of average ranks."""
    return plcc(rankdata(x), rankdata(y))


# --- prompt templates --------------------------------------------------------

@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    def __post_init__(self):
        if not self.name or not self.text:
            raise UnknownTemplate("template name and text must be non-empty")


_BUILTIN_TEMPLATES = [
    PromptTemplate("quality-basic", "high quality image"),
    PromptTemplate("quality-vivid-details", "extremely high quality image, with vivid details"),
    PromptTemplate("quality-high-resolution", "extremely high quality image, with high resolution"),
    PromptTemplate("authenticity", "very authentic image"),
    PromptTemplate("resolution", "high resolution"),
    PromptTemplate("vivid-details", "with vivid details"),
    PromptTemplate("no-blur", "without blur"),
    PromptTemplate("color-accuracy", "with accurate color"),
    PromptTemplate("contrast", "with high contrast"),
    PromptTemplate("noise-level", "without noise"),
]

TEMPLATES: dict[str, PromptTemplate] = {t.name: t for t in _BUILTIN_TEMPLATES}

# Child concepts that image quality decomposes into, each paired with the
# built-in template probing it. Order is the report order.
CHILD_METRICS: tuple[tuple[str, str], ...] = (
    ("Resolution", "resolution"),
    ("Vivid Details", "vivid-details"),
    ("No Blur", "no-blur"),
    ("Color Accuracy", "color-accuracy"),
    ("Contrast", "contrast"),
    ("Noise Level", "noise-level"),
)

BASE_TEMPLATE = "quality-vivid-details"


def get_template(name: str) -> PromptTemplate:
    if name not in TEMPLATES:
        raise UnknownTemplate(f"no template named {name!r}; known: {sorted(TEMPLATES)}")
    return TEMPLATES[name]


def register_template(template: PromptTemplate) -> None:
    if template.name in TEMPLATES:
        raise UnknownTemplate(f"template {template.name!r} already registered")
    TEMPLATES[template.name] = template


def prompt_metric_score(model: Model, image_features: np.ndarray,
                        template: PromptTemplate | str,
                        metric: str | None = None) -> float:
    """Score one concept for one image by pairing its features with a fixed
    concept prompt. Higher means the image agrees more with the concept.

    ``metric`` picks which head output acts as the matching score; defaults
    to "alignment" when the model has it, else the first metric.
    """
    if isinstance(template, str):
        template = get_template(template)
    if metric is None:
        metric = "alignment" if "alignment" in model.metric_names else model.metric_names[0]
    if metric not in model.metric_names:
        raise MetricNameMismatch(f"model has no metric {metric!r}")
    from .encoder import embed_text  # local import to keep module load light

    text = embed_text(template.text, model.encoder.cfg.input_dim)
    scores = model.score_features(text, np.asarray(image_features, dtype=np.float64))
    return float(scores[model.metric_names.index(metric)])


# --- sub-metric ratios -------------------------------------------------------

@dataclass(frozen=True)
class SubmetricReport:
    s_base: float
    entries: tuple[tuple[str, float, float], ...]  # (name, score, ratio)

    def to_dict(self) -> dict:
        return {
            "s_base": self.s_base,
            "children": [
                {"name": n, "score": s, "ratio": r} for n, s, r in self.entries
            ],
        }


def submetric_ratios(s_base: float, children: list[tuple[str, float]]) -> SubmetricReport:
    """Inverse-gap attribution: ratio_i = (1/(s_base-s_i)) / sum_j 1/(s_base-s_j).

    Requires s_base > s_i for every child; a violated gap raises
    NonPositiveGap rather than producing a sign-flipped ratio.
    """
    if not children:
        raise LengthMismatch("need at least one child score")
    gaps = []
    for name, s_i in children:
        gap = float(s_base) - float(s_i)
        if gap <= 0.0:
            raise NonPositiveGap(
                f"child {name!r} scored {s_i}, not below the base score {s_base}")
        gaps.append(gap)
    inv = np.array([1.0 / g for g in gaps], dtype=np.float64)
    ratios = inv / inv.sum()
    entries = tuple((name, float(s_i), float(ratio))
                    for (name, s_i), ratio in zip(children, ratios))
    return SubmetricReport(s_base=float(s_base), entries=entries)


# --- split evaluation --------------------------------------------------------

@dataclass
class EvalReport:
    split_name: str
    sample_count: int
    metrics: dict[str, dict[str, float | None]]  # name -> {"plcc":, "srcc":}
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def predict_manifest(model: Model, manifest: Manifest):
    """Model predictions and normalized targets, aligned by record.

    Returns (sample_ids, preds (N, M), targets (N, M)) ordered like the
    manifest and the model's metric names.
    """
    if len(manifest) == 0:
        raise EmptyManifest("manifest has no records")
    if tuple(manifest.metric_names) != tuple(model.metric_names):
        raise MetricNameMismatch(
            f"manifest metrics {manifest.metric_names} != model metrics "
            f"{model.metric_names}")
    normalized = normalize_scores(manifest)
    ids = [rec.sample_id for rec in normalized.records]
    preds = np.empty((len(normalized), len(model.metric_names)), dtype=np.float64)
    targets = np.empty_like(preds)
    for i, rec in enumerate(normalized.records):
        preds[i] = model.predict(rec, normalized.base_dir)
        targets[i] = [rec.mos[m] for m in model.metric_names]
    return ids, preds, targets


def build_report(metric_names, preds: np.ndarray, targets: np.ndarray,
                 split_name: str, seed: int | None = None,
                 provenance: dict | None = None) -> EvalReport:
    """Correlations per metric; a zero-variance column reports None."""
    metrics: dict[str, dict[str, float | None]] = {}
    for j, name in enumerate(metric_names):
        try:
            p = plcc(preds[:, j], targets[:, j])
            s = srcc(preds[:, j], targets[:, j])
        except ZeroVariance:
            p = s = None
        metrics[name] = {"plcc": p, "srcc": s}
    return EvalReport(split_name=split_name, sample_count=preds.shape[0],
                      metrics=metrics, seed=seed, provenance=provenance or {})


def evaluate_split(model: Model, test: Manifest, split_name: str = "test",
                   seed: int | None = None,
                   provenance: dict | None = None) -> EvalReport:
    ids, preds, targets = predict_manifest(model, test)
    return build_report(model.metric_names, preds, targets, split_name,
                        seed=seed, provenance=provenance)
