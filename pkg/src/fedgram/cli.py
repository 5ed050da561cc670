"""Command-line entry point: ``fedgram validate | run | sweep``.

Exit codes: 0 success, 1 runtime failure during a run, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .config import ConfigError, ExperimentConfig, config_hash, load_config, to_dict
from .simulation import RoundRecord, run_experiment

log = logging.getLogger("fedgram")

METRIC_COLUMNS = (
    "round",
    "test_acc",
    "best_acc",
    "n_sampled",
    "n_malicious_sampled",
    "n_removed",
    "detect_precision",
    "detect_recall",
    "mean_malicious_rank_fraction",
)
SUMMARY_FROM_ROUND = 10

# sweep axis -> dotted config path (None: the axis replaces a whole spec)
SWEEP_AXES = {
    "beta": "partition.beta",
    "C": "defense.C",
    "coverage": "aux_coverage",
    "malicious_fraction": "malicious_fraction",
    "defense": None,
    "attack": None,
}


class UsageError(Exception):
    pass


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def metrics_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for rec in records:
        writer.writerow([_cell(getattr(rec, col)) for col in METRIC_COLUMNS])
    return buf.getvalue()


def _mean_or_none(values: list[float]) -> float | None:
    return float(sum(values) / len(values)) if values else None


def summarize(records: Sequence[RoundRecord]) -> dict:
    late = [r for r in records if r.round >= SUMMARY_FROM_ROUND]
    return {
        "best_acc": max(r.test_acc for r in records),
        "final_acc": records[-1].test_acc,
        "rounds": len(records),
        "mean_detect_precision": _mean_or_none([r.detect_precision for r in late if r.detect_precision is not None]),
        "mean_detect_recall": _mean_or_none([r.detect_recall for r in late if r.detect_recall is not None]),
        "summary_from_round": SUMMARY_FROM_ROUND,
    }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load(path: str) -> ExperimentConfig:
    try:
        return load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None


def execute(cfg: ExperimentConfig, out_dir: Path, config_path: str | None = None) -> dict:
    """Run one experiment into ``out_dir``; returns the summary record."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.yaml"
    manifest = {
        "artifact_version": __version__,
        "config_path": config_path,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "outputs": {"metrics": "metrics.csv", "summary": "summary.json"},
        "started": _now(),
        "finished": None,
        "config": to_dict(cfg),
    }
    manifest_path.write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")

    def progress(rec: RoundRecord) -> None:
        log.info("round %d/%d  acc=%.4f  best=%.4f", rec.round, cfg.rounds, rec.test_acc, rec.best_acc)

    records = run_experiment(cfg, on_round=progress)
    (out_dir / "metrics.csv").write_text(metrics_csv(records), encoding="utf-8")
    summary = summarize(records)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    manifest["finished"] = _now()
    manifest_path.write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    return summary


def cmd_validate(args) -> int:
    try:
        _load(args.config)
    except ConfigError as exc:
        print(f"{args.config}: {len(exc.violations)} problem(s)")
        for v in exc.violations:
            print(f"  - {v}")
        return 2
    print(f"{args.config}: ok")
    return 0


def _with_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _with_overrides(_load(args.config), args)
    summary = execute(cfg, Path(args.out), args.config)
    print(json.dumps(summary))
    return 0


def _parse_value(axis: str, raw: str):
    if axis in ("defense", "attack"):
        return raw
    try:
        return float(raw)
    except ValueError:
        raise UsageError(f"--values: {raw!r} is not a number") from None


def sweep_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "defense":
        return cfg.replace(defense={"kind": value})
    if axis == "attack":
        return cfg.replace(attack={"kind": value})
    return cfg.replace(**{SWEEP_AXES[axis]: value})


def cmd_sweep(args) -> int:
    raw_values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not raw_values:
        raise UsageError("--values: empty value list")
    base = _with_overrides(_load(args.config), args)
    values = [_parse_value(args.axis, v) for v in raw_values]
    # build (and thereby validate) every config before running anything
    configs = [sweep_config(base, args.axis, v) for v in values]
    out = Path(args.out)
    rows = []
    for raw, cfg in zip(raw_values, configs):
        log.info("sweep %s=%s", args.axis, raw)
        summary = execute(cfg, out / f"{args.axis}={raw}", args.config)
        rows.append({args.axis: raw, **{k: summary[k] for k in ("best_acc", "final_acc", "mean_detect_precision", "mean_detect_recall")}})
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    (out / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(buf.getvalue(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgram", description="Federated poisoning and robust-aggregation lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="override the config's worker count")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one experiment per value of an axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated list")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print("error: invalid configuration", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
