"""Stage runner: gen -> atlas -> featurize -> train -> eval -> report.

Every stage reads only the artifacts of earlier stages plus its own config
section, and writes a manifest carrying the config hash and seed.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

from .config import PipelineConfig
from .ensemble_cv import (
    TASKS,
    FoldPlan,
    Member,
    audit_leakage,
    fold_log,
    fold_members_seed,
    fold_split,
    prepare_task_data,
    summarize,
    task_fold_plan,
    train_ensemble,
)
from .featurize import extract_features, read_feature_tables, write_feature_tables
from .network import branch_specs, build_dataset, load_mmdnn, save_mmdnn
from .patch_atlas import build_patch_atlas, load_patch_atlas, save_patch_atlas
from .synth_cohort import make_template, read_cohort, sample_cohort, write_cohort
from .volume_io import RoiAtlas, read_volume

log = logging.getLogger("mmdnn")

STAGES = ("gen", "atlas", "featurize", "train", "eval", "report")
DIRS = {"gen": "cohort", "atlas": "atlas", "featurize": "features", "train": "models",
        "eval": "eval", "report": "report"}


class StageDependencyError(FileNotFoundError):
    def __init__(self, stage: str, path: Path, producer: str):
        super().__init__(f"stage {stage!r} needs {path}; run {producer!r} first")
        self.stage = stage
        self.path = Path(path)
        self.producer = producer


def stage_dir(cfg: PipelineConfig, stage: str) -> Path:
    return cfg.output_dir / DIRS[stage]


def _require(cfg: PipelineConfig, stage: str, producer: str, name: str = "manifest.json") -> Path:
    path = stage_dir(cfg, producer) / name
    if not path.is_file():
        raise StageDependencyError(stage, path, producer)
    return path


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def run_gen(cfg: PipelineConfig, jobs: int = 1) -> Path:
    roi, brainstem = make_template(cfg.cohort)
    scans = sample_cohort(cfg.cohort, roi, brainstem)
    log.info("gen: %d scans of %d subjects", len(scans), sum(cfg.cohort.group_counts.values()))
    return write_cohort(stage_dir(cfg, "gen"), cfg.cohort, roi, brainstem, scans, extra=cfg.stamp("gen"))


def run_atlas(cfg: PipelineConfig, jobs: int = 1) -> Path:
    manifest = json.loads(_require(cfg, "atlas", "gen").read_text())
    cohort_dir = stage_dir(cfg, "gen")
    roi = RoiAtlas(read_volume(cohort_dir / manifest["roi_atlas"]), manifest["n_rois"])
    atlas = build_patch_atlas(roi, cfg.atlas_targets, cfg.seed, jobs=jobs)
    out = stage_dir(cfg, "atlas")
    files = save_patch_atlas(atlas, out)
    log.info("atlas: patches per scale %s", atlas.n_patches)
    return _write_json(out / "manifest.json", {
        **cfg.stamp("atlas"), "targets": list(cfg.atlas_targets), "n_patches": atlas.n_patches,
        "files": sorted(p.name for p in files),
    })


def run_featurize(cfg: PipelineConfig, jobs: int = 1) -> Path:
    _require(cfg, "featurize", "gen")
    _require(cfg, "featurize", "atlas")
    roi, _, scans = read_cohort(stage_dir(cfg, "gen"))
    atlas = load_patch_atlas(stage_dir(cfg, "atlas"))
    features = [extract_features(s, atlas, roi) for s in scans]
    log.info("featurize: %d scans", len(features))
    return write_feature_tables(features, stage_dir(cfg, "featurize"), atlas.n_patches,
                                extra=cfg.stamp("featurize"))


def _task_data(cfg: PipelineConfig, stage: str):
    manifest = json.loads(_require(cfg, stage, "featurize").read_text())
    features = read_feature_tables(stage_dir(cfg, "featurize"))
    full = build_dataset(features, branch_specs(manifest["n_patches"]))
    return prepare_task_data(full, cfg.experiment)


def run_train(cfg: PipelineConfig, jobs: int = 1) -> Path:
    spec = cfg.experiment
    data, specs = _task_data(cfg, "train")
    plan = task_fold_plan(data, spec)
    out = stage_dir(cfg, "train")
    folds = []
    for fold in range(plan.n_folds):
        train, _ = fold_split(data, plan, fold, TASKS[spec.task])
        members = train_ensemble(train, spec, specs, seed=fold_members_seed(spec, fold), jobs=jobs)
        entries = []
        for j, m in enumerate(members):
            rel = f"fold_{fold:02d}/member_{j:02d}"
            save_mmdnn(m.params, out / rel, spec.cfg)
            _write_json(out / rel / "training_log.json", m.log)
            entries.append({"dir": rel, "val_subjects": m.val_subjects, "val_accuracy": m.val_accuracy})
        folds.append({"fold": fold, "members": entries})
        log.info("train: fold %d/%d, member val acc %s", fold + 1, plan.n_folds,
                 [round(m.val_accuracy, 3) for m in members])
    return _write_json(out / "manifest.json", {
        **cfg.stamp("train"), "fold_plan": {"n_folds": plan.n_folds, "seed": plan.seed,
                                            "assignment": plan.assignment},
        "folds": folds,
    })


def run_eval(cfg: PipelineConfig, jobs: int = 1) -> Path:
    spec = cfg.experiment
    task = TASKS[spec.task]
    models = json.loads(_require(cfg, "eval", "train").read_text())
    data, _ = _task_data(cfg, "eval")
    fp = models["fold_plan"]
    plan = FoldPlan(fp["n_folds"], fp["assignment"], fp["seed"])
    model_dir = stage_dir(cfg, "train")
    folds = []
    for entry in models["folds"]:
        train, test = fold_split(data, plan, entry["fold"], task)
        members = [Member(load_mmdnn(model_dir / m["dir"]), m["val_subjects"], m["val_accuracy"], {})
                   for m in entry["members"]]
        folds.append(fold_log(entry["fold"], train, test, members, task))
    report = summarize(spec, folds)
    problems = audit_leakage(report)
    out = stage_dir(cfg, "eval")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as fh:
        rows = report.predictions()
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows({k: ("" if v is None else v) for k, v in r.items()} for r in rows)
    acc = report.metrics["cross_validated"]["accuracy"]
    log.info("eval: cross-validated accuracy %s, leakage problems %d", acc, len(problems))
    return _write_json(out / "manifest.json", {**cfg.stamp("eval"), "experiment": report.to_dict(),
                                               "leakage_problems": problems})


def run_report(cfg: PipelineConfig, jobs: int = 1) -> Path:
    from .report import write_report

    ev = json.loads(_require(cfg, "report", "eval").read_text())
    return write_report(ev, stage_dir(cfg, "report"), cfg)


RUNNERS = {"gen": run_gen, "atlas": run_atlas, "featurize": run_featurize, "train": run_train,
           "eval": run_eval, "report": run_report}


def run_pipeline(cfg: PipelineConfig, stage: str = "all", jobs: int = 1) -> Path:
    """Run one stage (or all of them); returns the last artifact path written."""
    order = STAGES if stage == "all" else (stage,)
    if stage != "all" and stage not in RUNNERS:
        raise ValueError(f"unknown stage {stage!r}")
    path = None
    for s in order:
        log.info("stage %s -> %s", s, stage_dir(cfg, s))
        path = RUNNERS[s](cfg, jobs)
    return path


def fold_accuracies(experiment: dict) -> list:
    return [f["confusion"]["accuracy"] for f in experiment["folds"]]
