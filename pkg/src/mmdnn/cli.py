"""Command-line entry point: ``mmdnn <stage> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigValidationError, PipelineConfig
from .pipeline import STAGES, StageDependencyError, run_pipeline, stage_dir

log = logging.getLogger("mmdnn")

MODALITY_CHOICES = {"volume": ["volume"], "pet": ["pet"], "both": ["volume", "pet"]}


def _scales(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"scales must be comma-separated integers, got {text!r}")
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError("scales must be non-empty and non-negative")
    return vals


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmdnn", description="Multimodal multiscale network pipeline on synthetic cohorts.")
    p.add_argument("stage", choices=[*STAGES, "all"])
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes for ensemble training")
    p.add_argument("--task", choices=["smci-pmci", "l1", "l2", "l3"])
    p.add_argument("--modality", choices=sorted(MODALITY_CHOICES))
    p.add_argument("--scales", type=_scales, help="comma-separated scale indices, e.g. 0,1,2")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> tuple[PipelineConfig, int]:
    doc = {}
    if args.config:
        with open(args.config) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigValidationError("", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigValidationError("", "top level must be an object")
    exp = dict(doc.get("experiment", {}))
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["output_dir"] = args.out
    if args.task is not None:
        exp["task"] = args.task
    if args.modality is not None:
        exp["modalities"] = MODALITY_CHOICES[args.modality]
    if args.scales is not None:
        exp["scales"] = args.scales
    if exp:
        doc["experiment"] = exp
    jobs = args.jobs if args.jobs is not None else doc.get("jobs", 1)
    if jobs < 1:
        raise ConfigValidationError("/jobs", "must be at least 1")
    return PipelineConfig.from_document(doc), jobs


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg, jobs = resolve_config(args)
        path = run_pipeline(cfg, args.stage, jobs=jobs)
    except ConfigValidationError as exc:
        return _fail("config", str(exc), 2, pointer=exc.pointer)
    except StageDependencyError as exc:
        return _fail("dependency", str(exc), 3, stage=exc.stage, missing=str(exc.path))
    except (OSError, ValueError, FloatingPointError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    if args.stage in ("all", "report"):
        print(stage_dir(cfg, "report") / "report.json")
    else:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
