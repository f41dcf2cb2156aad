"""Command-line entry point for reproducible runs driven by JSON configs.

Commands: split | train | eval | seeds-sweep | submetric. Every command
reads a config file, validates it strictly (unknown keys are rejected, all
referenced paths must exist before any work starts), and writes its
artifacts either under --out or under runs/<command>-<confighash>-<utc>/.

Exit codes: 0 success, 2 input or validation error, 3 runtime/training
failure. Setting METRICFORGE_DETERMINISTIC=1 pins numeric libraries to one
thread before they load, for bit-reproducible acceptance runs.

Heavy imports happen inside the command handlers so the thread-count pinning
can run first.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from .errors import ConfigError, MetricForgeError, RUNTIME_ERRORS

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


def _apply_determinism_env() -> None:
    if os.environ.get("METRICFORGE_DETERMINISTIC") == "1":
        for var in _THREAD_VARS:
            os.environ.setdefault(var, "1")


# --- config plumbing ---------------------------------------------------------

_MISSING = object()


def _check_keys(cfg: dict, allowed: dict, where: str) -> None:
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where}: {', '.join(unknown)}")


def _get(cfg: dict, key: str, types, default=_MISSING, where: str = "config"):
    if key not in cfg:
        if default is _MISSING:
            raise ConfigError(f"{where}: missing required key {key!r}")
        return default
    value = cfg[key]
    if types is not None and not isinstance(value, types):
        raise ConfigError(f"{where}: key {key!r} has wrong type "
                          f"{type(value).__name__}")
    if isinstance(value, bool) and types is not None and bool not in (
            types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"{where}: key {key!r} has wrong type bool")
    return value


def _require_file(path_str: str, label: str, base: Path) -> Path:
    path = Path(path_str)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise ConfigError(f"{label} path does not exist: {path}")
    return path


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return cfg


def config_hash(cfg: dict, command: str) -> str:
    canon = json.dumps({"command": command, "config": cfg}, sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:10]


def resolve_outdir(out: str | None, cfg: dict, command: str) -> Path:
    if out:
        outdir = Path(out)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        outdir = Path("runs") / f"{command}-{config_hash(cfg, command)}-{stamp}"
    outdir.mkdir(parents=True, exist_ok=True)
    return outdir


def _write_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _hyperparams(cfg: dict, seed_override: int | None):
    from .training import HYPERPARAM_PRESETS, HyperParams

    preset = _get(cfg, "preset", str, default=None)
    overrides = _get(cfg, "hyperparams", dict, default={})
    if preset is not None:
        if preset not in HYPERPARAM_PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; "
                              f"known: {sorted(HYPERPARAM_PRESETS)}")
        base = dataclasses.asdict(HYPERPARAM_PRESETS[preset])
    else:
        base = dataclasses.asdict(HyperParams())
    _check_keys(overrides, base, "hyperparams")
    base.update(overrides)
    if seed_override is not None:
        base["seed"] = seed_override
    try:
        return HyperParams(**base)
    except MetricForgeError:
        raise
    except TypeError as exc:
        raise ConfigError(f"bad hyperparams: {exc}") from exc


_ENCODER_KEYS = {"d": 24, "L": 8, "pre_encoder_heads": 3, "layers": 1,
                 "seed": 0, "d_in": None}


def _encoder_config(cfg: dict, manifest):
    from .encoder import EncoderConfig
    from .pipeline import record_features

    block = _get(cfg, "encoder", dict, default={})
    _check_keys(block, _ENCODER_KEYS, "encoder")
    values = dict(_ENCODER_KEYS)
    values.update(block)
    if values["d_in"] is None:
        # infer the feature width from the first record
        _, image = record_features(manifest.records[0], d_in=1,
                                   base_dir=manifest.base_dir)
        values["d_in"] = int(image.shape[1])
    return EncoderConfig(**values)


def _selector(cfg: dict, metric_names):
    from .training import TaskSelector

    names = _get(cfg, "selector", list, default=None)
    if names is None:
        return None
    if not all(isinstance(n, str) for n in names):
        raise ConfigError("selector must be a list of metric names")
    unknown = [n for n in names if n not in metric_names]
    if unknown:
        raise ConfigError(f"selector names unknown metrics: {unknown}")
    return TaskSelector(tuple(names))


# --- commands ----------------------------------------------------------------

_SPLIT_KEYS = {"manifest", "train_fraction", "seed"}


def cmd_split(cfg: dict, outdir: Path, base: Path, seed_override: int | None) -> int:
    from .dataset import (SplitSpec, content_isolated_split, load_manifest,
                          split_report, write_manifest)

    _check_keys(cfg, dict.fromkeys(_SPLIT_KEYS), "config")
    manifest_path = _require_file(_get(cfg, "manifest", str), "manifest", base)
    fraction = float(_get(cfg, "train_fraction", (int, float), default=0.8))
    seed = seed_override if seed_override is not None else _get(
        cfg, "seed", int, default=42)
    manifest = load_manifest(manifest_path)
    try:
        spec = SplitSpec(train_fraction=fraction, seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    train, test = content_isolated_split(manifest, spec)
    write_manifest(train, outdir / "train.jsonl")
    write_manifest(test, outdir / "test.jsonl")
    _write_json(split_report(manifest, spec, train, test),
                outdir / "split_report.json")
    print(f"split {len(manifest)} records into {len(train)} train / "
          f"{len(test)} test under {outdir}")
    return 0


_TRAIN_KEYS = {"train_manifest", "selector", "weighting", "preset",
               "hyperparams", "encoder", "init_checkpoint", "freeze_encoder"}


def cmd_train(cfg: dict, outdir: Path, base: Path, seed_override: int | None) -> int:
    from .dataset import load_manifest, normalize_scores
    from .training import (TaskSelector, fit, load_checkpoint,
                           save_checkpoint, second_training,
                           write_history_csv)

    _check_keys(cfg, dict.fromkeys(_TRAIN_KEYS), "config")
    manifest_path = _require_file(_get(cfg, "train_manifest", str),
                                  "train_manifest", base)
    weighting = _get(cfg, "weighting", str, default="static")
    if weighting not in ("static", "dynamic"):
        raise ConfigError(f"weighting must be 'static' or 'dynamic', got {weighting!r}")
    freeze = bool(_get(cfg, "freeze_encoder", bool, default=False))
    init_ckpt_path = _get(cfg, "init_checkpoint", str, default=None)
    if init_ckpt_path is not None:
        init_ckpt_path = _require_file(init_ckpt_path, "init_checkpoint", base)

    manifest = normalize_scores(load_manifest(manifest_path))
    hp = _hyperparams(cfg, seed_override)
    selector = _selector(cfg, manifest.metric_names)

    if init_ckpt_path is not None:
        ckpt_in = load_checkpoint(init_ckpt_path)
        sel = selector if selector is not None else TaskSelector(manifest.metric_names)
        ckpt = second_training(ckpt_in, manifest, hp, sel,
                               weighting=weighting, freeze_encoder=freeze)
    else:
        encoder_cfg = _encoder_config(cfg, manifest)
        ckpt = fit(manifest, hp, selector=selector, weighting=weighting,
                   encoder_cfg=encoder_cfg, freeze_encoder=freeze)

    save_checkpoint(ckpt, outdir / "checkpoint")
    write_history_csv(ckpt.history, ckpt.metric_names, outdir / "history.csv")
    if ckpt.history:
        last = ckpt.history[-1]["loss"]
        summary = ", ".join(f"{m}={last[m]:.6f}" for m in ckpt.metric_names)
        print(f"trained {hp.epochs} epochs; final loss {summary}")
    print(f"checkpoint: {outdir / 'checkpoint'}")
    return 0


_EVAL_KEYS = {"checkpoint", "manifest", "split_name"}


def _write_eval_artifacts(report, ids, preds, targets, metric_names,
                          outdir: Path) -> None:
    _write_json(report.to_dict(), outdir / "report.json")
    with open(outdir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "plcc", "srcc"])
        for name in metric_names:
            entry = report.metrics[name]
            writer.writerow([name,
                             "" if entry["plcc"] is None else f"{entry['plcc']:.10g}",
                             "" if entry["srcc"] is None else f"{entry['srcc']:.10g}"])
    with open(outdir / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "metric", "prediction", "target"])
        for i, sid in enumerate(ids):
            for j, name in enumerate(metric_names):
                writer.writerow([sid, name, f"{preds[i, j]:.17g}",
                                 f"{targets[i, j]:.17g}"])


def cmd_eval(cfg: dict, outdir: Path, base: Path, seed_override: int | None) -> int:
    from .dataset import load_manifest
    from .evaluation import build_report, predict_manifest
    from .training import load_checkpoint

    _check_keys(cfg, dict.fromkeys(_EVAL_KEYS), "config")
    ckpt_path = _require_file(_get(cfg, "checkpoint", str), "checkpoint", base)
    manifest_path = _require_file(_get(cfg, "manifest", str), "manifest", base)
    split_name = _get(cfg, "split_name", str, default="test")
    ckpt = load_checkpoint(ckpt_path)
    manifest = load_manifest(manifest_path)
    ids, preds, targets = predict_manifest(ckpt.model, manifest)
    report = build_report(ckpt.metric_names, preds, targets, split_name,
                          seed=ckpt.hyperparams.seed, provenance=ckpt.provenance)
    _write_eval_artifacts(report, ids, preds, targets, ckpt.metric_names, outdir)
    for name in ckpt.metric_names:
        entry = report.metrics[name]
        plcc_s = "undefined" if entry["plcc"] is None else f"{entry['plcc']:.4f}"
        srcc_s = "undefined" if entry["srcc"] is None else f"{entry['srcc']:.4f}"
        print(f"{split_name} {name}: plcc={plcc_s} srcc={srcc_s}")
    return 0


_SWEEP_KEYS = {"manifest", "seeds", "train_fraction", "selector", "weighting",
               "preset", "hyperparams", "encoder", "freeze_encoder"}


def cmd_seeds_sweep(cfg: dict, outdir: Path, base: Path,
                    seed_override: int | None) -> int:
    import dataclasses as dc

    from .dataset import (SplitSpec, content_isolated_split, load_manifest,
                          normalize_scores)
    from .evaluation import build_report, predict_manifest
    from .training import fit, save_checkpoint, write_history_csv

    _check_keys(cfg, dict.fromkeys(_SWEEP_KEYS), "config")
    manifest_path = _require_file(_get(cfg, "manifest", str), "manifest", base)
    seeds = _get(cfg, "seeds", list, default=[42, 100, 200])
    if seed_override is not None:
        seeds = [seed_override]
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    fraction = float(_get(cfg, "train_fraction", (int, float), default=0.8))
    weighting = _get(cfg, "weighting", str, default="static")
    freeze = bool(_get(cfg, "freeze_encoder", bool, default=False))
    manifest = load_manifest(manifest_path)
    selector = _selector(cfg, manifest.metric_names)

    rows = []
    for seed in seeds:
        hp = dc.replace(_hyperparams(cfg, None), seed=seed)
        try:
            spec = SplitSpec(train_fraction=fraction, seed=seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        train, test = content_isolated_split(manifest, spec)
        train, test = normalize_scores(train), normalize_scores(test)
        encoder_cfg = _encoder_config(cfg, train)
        ckpt = fit(train, hp, selector=selector, weighting=weighting,
                   encoder_cfg=encoder_cfg, freeze_encoder=freeze)
        seed_dir = outdir / f"seed-{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, seed_dir / "checkpoint")
        write_history_csv(ckpt.history, ckpt.metric_names, seed_dir / "history.csv")
        ids, preds, targets = predict_manifest(ckpt.model, test)
        report = build_report(ckpt.metric_names, preds, targets, "test",
                              seed=seed, provenance=ckpt.provenance)
        _write_eval_artifacts(report, ids, preds, targets, ckpt.metric_names,
                              seed_dir)
        row = {"seed": seed}
        for name in ckpt.metric_names:
            row[f"plcc_{name}"] = report.metrics[name]["plcc"]
            row[f"srcc_{name}"] = report.metrics[name]["srcc"]
        rows.append(row)
        printable = " ".join(
            f"{k}={v:.4f}" for k, v in row.items()
            if k != "seed" and v is not None)
        print(f"seed {seed}: {printable}")

    fields = list(rows[0].keys())
    with open(outdir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    _write_json({"seeds": seeds, "rows": rows}, outdir / "sweep.json")
    print(f"sweep table: {outdir / 'sweep.csv'}")
    return 0


_SUBMETRIC_KEYS = {"scores", "checkpoint", "manifest", "base_template",
                   "child_templates", "metric"}


def cmd_submetric(cfg: dict, outdir: Path, base: Path,
                  seed_override: int | None) -> int:
    from .evaluation import (BASE_TEMPLATE, CHILD_METRICS, get_template,
                             prompt_metric_score, submetric_ratios)

    _check_keys(cfg, dict.fromkeys(_SUBMETRIC_KEYS), "config")
    scores_block = _get(cfg, "scores", dict, default=None)
    if scores_block is not None:
        _check_keys(scores_block, {"base": None, "children": None}, "scores")
        s_base = float(_get(scores_block, "base", (int, float), where="scores"))
        children_map = _get(scores_block, "children", dict, where="scores")
        if not children_map:
            raise ConfigError("scores.children must not be empty")
        children = [(str(k), float(v)) for k, v in children_map.items()]
    else:
        from .dataset import load_manifest
        from .pipeline import record_features
        from .training import load_checkpoint

        ckpt_path = _require_file(_get(cfg, "checkpoint", str), "checkpoint", base)
        manifest_path = _require_file(_get(cfg, "manifest", str), "manifest", base)
        base_template = get_template(_get(cfg, "base_template", str,
                                          default=BASE_TEMPLATE))
        child_spec = _get(cfg, "child_templates", dict,
                          default={name: tmpl for name, tmpl in CHILD_METRICS})
        metric = _get(cfg, "metric", str, default=None)
        ckpt = load_checkpoint(ckpt_path)
        manifest = load_manifest(manifest_path)
        if len(manifest) == 0:
            raise ConfigError("manifest has no records")

        def mean_score(template) -> float:
            total = 0.0
            for rec in manifest.records:
                _, image = record_features(rec, ckpt.model.encoder.cfg.input_dim,
                                           manifest.base_dir)
                total += prompt_metric_score(ckpt.model, image, template,
                                             metric=metric)
            return total / len(manifest)

        s_base = mean_score(base_template)
        children = [(name, mean_score(get_template(tmpl)))
                    for name, tmpl in child_spec.items()]

    report = submetric_ratios(s_base, children)
    _write_json(report.to_dict(), outdir / "submetric.json")
    with open(outdir / "submetric.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["child", "score", "ratio"])
        for name, score, ratio in report.entries:
            writer.writerow([name, f"{score:.10g}", f"{ratio:.10g}"])
    for name, score, ratio in report.entries:
        print(f"{name}: score={score:.4f} ratio={ratio:.4f}")
    return 0


# --- entry point -------------------------------------------------------------

_COMMANDS = {
    "split": (cmd_split, "content-isolated train/test split"),
    "train": (cmd_train, "train the encoder and scoring head"),
    "eval": (cmd_eval, "correlation report for a checkpoint on a manifest"),
    "seeds-sweep": (cmd_seeds_sweep, "re-split/train/eval across several seeds"),
    "submetric": (cmd_submetric, "inverse-gap child-metric attribution"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metricforge",
        description="Multi-metric assessment toolkit for AI-generated images.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", default=None,
                       help="output directory (default: runs/<cmd>-<hash>-<utc>)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed(s)")
    return parser


def main(argv=None) -> int:
    _apply_determinism_env()
    args = build_parser().parse_args(argv)
    handler = _COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config)
        base = Path(args.config).resolve().parent
        outdir = resolve_outdir(args.out, cfg, args.command)
        return handler(cfg, outdir, base, args.seed)
    except MetricForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3 if isinstance(exc, RUNTIME_ERRORS) else 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
