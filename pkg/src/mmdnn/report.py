"""Experiment report: JSON, aligned text, CSV tables and figures."""

from __future__ import annotations

import csv
import json
from datetime import datetime, timezone
from pathlib import Path

import jsonschema

from .ensemble_cv import PUBLISHED_REFERENCE
from .plotting import plot_folds, plot_horizon

TIMESTAMP_FIELD = "generated_at"
_RATES = ("accuracy", "sensitivity", "specificity")

_RATE = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
_METRICS = {
    "type": "object",
    "required": ["tp", "fp", "tn", "fn", *_RATES],
    "properties": {**{k: {"type": "integer", "minimum": 0} for k in ("tp", "fp", "tn", "fn")},
                   **{k: _RATE for k in _RATES}},
}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["config_hash", "seed", "config", "task", "metrics", "subject_metrics", "progressive",
                 "horizon", "folds", "leakage_problems", "published_reference", "files", TIMESTAMP_FIELD],
    "properties": {
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "seed": {"type": "integer", "minimum": 0},
        "task": {"enum": ["smci-pmci", "l1", "l2", "l3"]},
        "metrics": {"type": "object", "required": ["cross_validated", "always_test", "all_test"],
                    "additionalProperties": _METRICS},
        "progressive": _METRICS,
        "horizon": {"type": "array", "items": {"type": "object", "required": ["bucket", "count", "accuracy"],
                                               "properties": {"accuracy": _RATE}}},
        "folds": {"type": "array", "minItems": 1},
        "leakage_problems": {"type": "array", "items": {"type": "string"}},
        "published_reference": {"type": "object", "required": ["reproduced"],
                            "properties": {"reproduced": {"const": False}}},
        TIMESTAMP_FIELD: {"type": "string"},
    },
}


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def _write_csv(path: Path, header: list, rows: list) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(["" if v is None else v for v in r] for r in rows)
    return path


def build_summary(ev: dict) -> dict:
    exp = ev["experiment"]
    folds = exp["folds"]
    return {
        "config_hash": ev["config_hash"],
        "seed": ev["seed"],
        "config": ev["config"],
        "task": exp["spec"]["task"],
        "metrics": exp["metrics"],
        "subject_metrics": exp["subject_metrics"],
        "progressive": exp["progressive"],
        "horizon": exp["horizon"],
        "folds": [{"fold": f["fold"], "n_train_subjects": len(f["train_subjects"]),
                   "n_test_subjects": len(f["test_subjects"]), "confusion": f["confusion"],
                   "member_val_accuracy": f["member_val_accuracy"]} for f in folds],
        "leakage_problems": ev["leakage_problems"],
        "published_reference": PUBLISHED_REFERENCE,
    }


def render_text(summary: dict) -> str:
    lines = [f"task {summary['task']}  seed {summary['seed']}  config {summary['config_hash'][:12]}", ""]
    lines.append(f"{'block':<16}{'n':>6}{'accuracy':>11}{'sensitivity':>13}{'specificity':>13}")
    blocks = [(k, v) for k, v in summary["metrics"].items()]
    blocks += [("subject", summary["subject_metrics"]["cross_validated"]), ("progressive", summary["progressive"])]
    for name, m in blocks:
        n = m["tp"] + m["fp"] + m["tn"] + m["fn"]
        lines.append(f"{name:<16}{n:>6}{_fmt(m['accuracy']):>11}{_fmt(m['sensitivity']):>13}{_fmt(m['specificity']):>13}")
    if summary["horizon"]:
        lines += ["", f"{'months to conversion':<22}{'n':>6}{'accuracy':>11}"]
        for r in summary["horizon"]:
            lines.append(f"{r['bucket']:<22}{r['count']:>6}{_fmt(r['accuracy']):>11}")
    lines += ["", f"leakage problems: {len(summary['leakage_problems'])}",
              "reference values from the real cohort are listed in report.json and are not reproduced here."]
    return "\n".join(lines) + "\n"


def write_report(ev: dict, directory, cfg=None) -> Path:
    """Write report.json, report.txt, CSV tables and PNG figures; returns the JSON path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    summary = build_summary(ev)
    _write_csv(directory / "metrics.csv", ["block", "tp", "fp", "tn", "fn", *_RATES],
               [[k, *(m[c] for c in ("tp", "fp", "tn", "fn", *_RATES))] for k, m in
                [*summary["metrics"].items(), ("progressive", summary["progressive"])]])
    _write_csv(directory / "horizon.csv", ["bucket", "min_months", "max_months", "count", "accuracy"],
               [[r["bucket"], r["min_months"], r["max_months"], r["count"], r["accuracy"]] for r in summary["horizon"]])
    _write_csv(directory / "folds.csv", ["fold", "n_train_subjects", "n_test_subjects", *_RATES],
               [[f["fold"], f["n_train_subjects"], f["n_test_subjects"], *(f["confusion"][c] for c in _RATES)]
                for f in summary["folds"]])
    figures = [plot_folds([f["confusion"]["accuracy"] for f in summary["folds"]],
                          [f["member_val_accuracy"] for f in summary["folds"]], directory / "folds.png")]
    if summary["horizon"]:
        figures.append(plot_horizon(summary["horizon"], PUBLISHED_REFERENCE["horizon_accuracy"], directory / "horizon.png"))
    summary["files"] = sorted(["report.txt", "metrics.csv", "horizon.csv", "folds.csv"] + [p.name for p in figures])
    summary[TIMESTAMP_FIELD] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    (directory / "report.txt").write_text(render_text(summary))
    path = directory / "report.json"
    path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return path


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


def strip_timestamps(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != TIMESTAMP_FIELD}
