"""Shared fixtures and independent oracles for the test suite.

The finite-difference gradient oracle and the manifest builders here stay
deliberately separate from the package's own code paths.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from metricforge.dataset import Manifest, SampleRecord

THREE_METRICS = ("quality", "alignment", "authenticity")


def make_manifest(groups: dict[str, int], metric_names=THREE_METRICS,
                  score_range=(1.0, 5.0), seed: int = 0,
                  feature_shape=(2, 4)) -> Manifest:
    """Small in-memory manifest: ``groups`` maps prompt_id -> record count."""
    rng = np.random.default_rng(seed)
    records = []
    for prompt_id, count in groups.items():
        text = f"prompt text for {prompt_id}"
        for k in range(count):
            feats = rng.uniform(-1, 1, size=feature_shape)
            mos = {m: float(rng.uniform(score_range[0], score_range[1]))
                   for m in metric_names}
            records.append(SampleRecord(
                sample_id=f"{prompt_id}-r{k}", prompt_id=prompt_id,
                prompt_text=text, feature_ref=feats.tolist(), mos=mos))
    return Manifest(records=tuple(records), metric_names=tuple(metric_names),
                    score_range={m: score_range for m in metric_names})


@pytest.fixture
def manifest_file(tmp_path) -> Path:
    """Valid 3-record manifest file with quality/alignment/authenticity in [1, 5]."""
    path = tmp_path / "manifest.jsonl"
    header = {"metric_names": list(THREE_METRICS),
              "score_range": {m: [1, 5] for m in THREE_METRICS}}
    rows = [
        {"sample_id": "s1", "prompt_id": "p1", "prompt_text": "a red fox",
         "feature_ref": [[0.1, 0.2], [0.3, 0.4]],
         "mos": {"quality": 4.0, "alignment": 3.5, "authenticity": 2.0}},
        {"sample_id": "s2", "prompt_id": "p1", "prompt_text": "a red fox",
         "feature_ref": [[0.5, 0.6], [0.7, 0.8]],
         "mos": {"quality": 1.0, "alignment": 5.0, "authenticity": 3.3}},
        {"sample_id": "s3", "prompt_id": "p2", "prompt_text": "a blue bird",
         "feature_ref": [[0.0, 1.0], [1.0, 0.0]],
         "mos": {"quality": 5.0, "alignment": 2.25, "authenticity": 4.8}},
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path


def write_jsonl(path: Path, objects: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objects:
            fh.write(json.dumps(obj) + "\n")
    return path


# --- finite-difference oracle -------------------------------------------------

def fd_gradient(loss_fn, param: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. one tensor, in place."""
    grad = np.empty_like(param)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray,
              floor: float = 1e-6) -> float:
    """Norm-relative error with a scale floor so that tensors whose true
    gradient is zero (finite-difference noise only) do not blow up the ratio."""
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / denom


def check_gradients(loss_fn, params: dict[str, np.ndarray],
                    analytic: dict[str, np.ndarray],
                    tol: float = 1e-4, h: float = 1e-5) -> dict[str, float]:
    """Compare analytic gradients to finite differences for every tensor.

    The floor scales with the largest gradient tensor so that parameters
    whose true gradient is identically zero (key-projection biases cancel
    inside every softmax row) measure finite-difference roundoff against the
    problem's own gradient magnitude instead of blowing up the ratio.
    """
    scale = max(float(np.linalg.norm(g)) for g in analytic.values())
    floor = max(1e-6, 1e-5 * scale)
    errors = {}
    for name, p in params.items():
        numeric = fd_gradient(loss_fn, p, h=h)
        errors[name] = rel_error(analytic[name], numeric, floor=floor)
    worst = max(errors, key=errors.get)
    assert errors[worst] < tol, f"gradient mismatch at {worst}: {errors[worst]:.3e}"
    return errors
