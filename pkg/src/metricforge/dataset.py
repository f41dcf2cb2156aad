"""Manifest ingestion, score normalization, and content-isolated splitting.

A manifest is a JSON-lines file. Line 1 is a header object declaring
``metric_names`` and a per-metric ``score_range``; every following line is
one labeled sample:

    {"metric_names": ["quality", "alignment"], "score_range": {"quality": [1, 5], ...}}
    {"sample_id": "s0", "prompt_id": "p0", "prompt_text": "...",
     "feature_ref": [[...], ...] or "features/s0.mft", "mos": {"quality": 3.2, ...}}

``feature_ref`` is either an inline row-major matrix (list of equal-length
lists) or a path to a tensor file, resolved relative to the manifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    DegenerateRange,
    DuplicateSampleId,
    InconsistentMetricKeys,
    InconsistentPromptGroup,
    IoFailure,
    ManifestError,
    MissingField,
    ScoreOutOfRange,
    TooFewGroups,
)
from .prng import SplitMix64

_RECORD_FIELDS = ("sample_id", "prompt_id", "prompt_text", "feature_ref", "mos")


@dataclass(frozen=True)
class SampleRecord:
    """One labeled example: feature payload, generating prompt, and raw scores."""

    sample_id: str
    prompt_id: str
    prompt_text: str
    feature_ref: str | list
    mos: dict[str, float]


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...]
    metric_names: tuple[str, ...]
    score_range: dict[str, tuple[float, float]]
    base_dir: Path | None = None  # anchor for path-valued feature_refs

    def __len__(self) -> int:
        return len(self.records)

    def group_ids(self) -> list[str]:
        """Distinct prompt_ids in first-appearance order."""
        seen: dict[str, None] = {}
        for rec in self.records:
            seen.setdefault(rec.prompt_id, None)
        return list(seen)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 42

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


def _validate_header(header: dict) -> tuple[tuple[str, ...], dict[str, tuple[float, float]]]:
    if "metric_names" not in header:
        raise MissingField("header missing 'metric_names'", line=1)
    if "score_range" not in header:
        raise MissingField("header missing 'score_range'", line=1)
    names = header["metric_names"]
    if not isinstance(names, list) or not names or not all(isinstance(n, str) for n in names):
        raise MissingField("'metric_names' must be a non-empty list of strings", line=1)
    if len(set(names)) != len(names):
        raise InconsistentMetricKeys("duplicate metric names in header", line=1)
    ranges = header["score_range"]
    if not isinstance(ranges, dict) or set(ranges) != set(names):
        raise InconsistentMetricKeys(
            "'score_range' keys must match 'metric_names'", line=1)
    out: dict[str, tuple[float, float]] = {}
    for name in names:
        pair = ranges[name]
        if (not isinstance(pair, (list, tuple)) or len(pair) != 2
                or not all(isinstance(v, (int, float)) for v in pair)):
            raise MissingField(f"score_range for {name!r} must be [min, max]", line=1)
        out[name] = (float(pair[0]), float(pair[1]))
    return tuple(names), out


def _validate_record(obj: dict, line: int, metric_names: tuple[str, ...],
                     score_range: dict[str, tuple[float, float]]) -> SampleRecord:
    for key in _RECORD_FIELDS:
        if key not in obj:
            raise MissingField(f"record missing {key!r}", line=line)
    if not isinstance(obj["prompt_id"], str) or not obj["prompt_id"]:
        raise MissingField("prompt_id must be a non-empty string", line=line)
    mos = obj["mos"]
    if not isinstance(mos, dict):
        raise MissingField("'mos' must be an object", line=line)
    if set(mos) != set(metric_names):
        raise InconsistentMetricKeys(
            f"mos keys {sorted(mos)} do not match metric_names {sorted(metric_names)}",
            line=line)
    clean: dict[str, float] = {}
    for name in metric_names:
        v = mos[name]
        if not isinstance(v, (int, float)) or not math.isfinite(float(v)):
            raise ScoreOutOfRange(f"mos[{name!r}] is not a finite number", line=line)
        lo, hi = score_range[name]
        if not (lo <= float(v) <= hi):
            raise ScoreOutOfRange(
                f"mos[{name!r}]={v} outside declared range [{lo}, {hi}]", line=line)
        clean[name] = float(v)
    return SampleRecord(
        sample_id=str(obj["sample_id"]),
        prompt_id=str(obj["prompt_id"]),
        prompt_text=str(obj["prompt_text"]),
        feature_ref=obj["feature_ref"],
        mos=clean,
    )


def load_manifest(path: str | Path) -> Manifest:
    """Parse and fully validate a JSON-lines manifest file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid UTF-8: {exc}") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise MissingField("empty manifest file", line=1)

    def parse(line_no: int, raw: str) -> dict:
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise MissingField(f"invalid JSON: {exc}", line=line_no) from exc
        if not isinstance(obj, dict):
            raise MissingField("line is not a JSON object", line=line_no)
        return obj

    metric_names, score_range = _validate_header(parse(1, lines[0]))
    records: list[SampleRecord] = []
    seen_ids: dict[str, int] = {}
    prompt_of_text: dict[str, tuple[str, int]] = {}
    for idx, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        rec = _validate_record(parse(idx, raw), idx, metric_names, score_range)
        if rec.sample_id in seen_ids:
            raise DuplicateSampleId(
                f"sample_id {rec.sample_id!r} already used on line {seen_ids[rec.sample_id]}",
                line=idx)
        seen_ids[rec.sample_id] = idx
        if rec.prompt_text in prompt_of_text:
            pid, first = prompt_of_text[rec.prompt_text]
            if pid != rec.prompt_id:
                raise InconsistentPromptGroup(
                    f"prompt_text already bound to prompt_id {pid!r} on line {first}",
                    line=idx)
        else:
            prompt_of_text[rec.prompt_text] = (rec.prompt_id, idx)
        records.append(rec)
    return Manifest(records=tuple(records), metric_names=metric_names,
                    score_range=score_range, base_dir=path.parent)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    header = {
        "metric_names": list(manifest.metric_names),
        "score_range": {k: [v[0], v[1]] for k, v in manifest.score_range.items()},
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for rec in manifest.records:
                fh.write(json.dumps(dataclasses.asdict(rec)) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def normalize_scores(manifest: Manifest) -> Manifest:
    """Affinely map every mos value to [0, 1] using the declared ranges.

    Uses the declared range rather than the empirical one so train and test
    preprocessing are identical and leakage-free.
    """
    for name, (lo, hi) in manifest.score_range.items():
        if not lo < hi:
            raise DegenerateRange(f"metric {name!r} has degenerate range [{lo}, {hi}]")
    records = tuple(
        dataclasses.replace(
            rec,
            mos={name: (rec.mos[name] - manifest.score_range[name][0])
                 / (manifest.score_range[name][1] - manifest.score_range[name][0])
                 for name in manifest.metric_names},
        )
        for rec in manifest.records
    )
    return dataclasses.replace(
        manifest,
        records=records,
        score_range={name: (0.0, 1.0) for name in manifest.metric_names},
    )


def content_isolated_split(manifest: Manifest, spec: SplitSpec) -> tuple[Manifest, Manifest]:
    """Split whole prompt groups into train/test so no prompt leaks across.

    Groups (first-appearance order) are shuffled by Fisher-Yates driven by
    splitmix64(seed); the first ceil(train_fraction * G) shuffled groups form
    the train side, clamped so the test side keeps at least one group.
    Records stay in file order within each output.
    """
    groups = manifest.group_ids()
    if len(groups) < 2:
        raise TooFewGroups(f"need at least 2 prompt groups, found {len(groups)}")
    order = list(range(len(groups)))
    SplitMix64(spec.seed).shuffle(order)
    n_train = min(math.ceil(spec.train_fraction * len(groups)), len(groups) - 1)
    train_ids = {groups[i] for i in order[:n_train]}
    train_records = tuple(r for r in manifest.records if r.prompt_id in train_ids)
    test_records = tuple(r for r in manifest.records if r.prompt_id not in train_ids)
    return (dataclasses.replace(manifest, records=train_records),
            dataclasses.replace(manifest, records=test_records))


def split_report(manifest: Manifest, spec: SplitSpec,
                 train: Manifest, test: Manifest) -> dict:
    """Describe a split for the JSON split-report artifact."""
    return {
        "seed": spec.seed,
        "train_fraction": spec.train_fraction,
        "group_count": len(manifest.group_ids()),
        "train_groups": train.group_ids(),
        "test_groups": test.group_ids(),
        "train_records": len(train),
        "test_records": len(test),
    }


def manifest_fingerprint(manifest: Manifest) -> str:
    """Stable digest of ids and scores; recorded in checkpoint provenance."""
    h = hashlib.sha256()
    h.update(json.dumps(list(manifest.metric_names)).encode())
    for rec in manifest.records:
        h.update(json.dumps([rec.sample_id, rec.prompt_id, rec.mos],
                            sort_keys=True).encode())
    return h.hexdigest()
