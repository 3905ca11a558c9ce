"""Pipeline configuration: presets, JSON loading with schema checks, hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .ensemble_cv import TASKS, ExperimentSpec
from .network import MODALITY_ORDER, TrainConfig
from .synth_cohort import EFFECT_PRESETS, CohortSpec

U64 = 2**64 - 1

# Desk scale: 32^3 ROIs hold a few hundred voxels, so patch targets shrink
# in proportion and the epoch budget is cut to fit a workstation.
PRESETS = {
    "desk": {
        "atlas": {"targets": [60, 120, 240]},
        "experiment": {"train": {"patience_epochs": 10, "max_epochs": 40, "pretrain_epochs": 5}},
    },
    "full": {
        "atlas": {"targets": [500, 1000, 2000]},
        "experiment": {"train": {}},
    },
}

_POS = {"type": "integer", "minimum": 1}

_GROUP_MAP = {
    "type": "object",
    "propertyNames": {"enum": ["sNC", "sMCI", "pNC", "pMCI", "sAD"]},
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": sorted(PRESETS)},
        "seed": {"type": "integer", "minimum": 0, "maximum": U64},
        "output_dir": {"type": "string", "minLength": 1},
        "jobs": _POS,
        "cohort": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dims": {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3},
                "spacing_mm": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                               "minItems": 3, "maxItems": 3},
                "n_rois": _POS,
                "group_counts": {**_GROUP_MAP, "additionalProperties": {"type": "integer", "minimum": 0}},
                "effect": {"oneOf": [
                    {"enum": sorted(EFFECT_PRESETS)},
                    {**_GROUP_MAP, "additionalProperties": {
                        "type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "minItems": 2, "maxItems": 2}},
                ]},
                "affected_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "noise_sigma": {"type": "number", "minimum": 0},
                "subject_sigma": {"type": "number", "minimum": 0},
                "pet_gain_sigma": {"type": "number", "minimum": 0},
                "scans_per_subject": _POS,
                "months_between_scans": _POS,
                "horizon_months": _POS,
            },
        },
        "atlas": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"targets": {"type": "array", "items": _POS, "minItems": 1}},
        },
        "experiment": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "task": {"enum": sorted(TASKS)},
                "modalities": {"type": "array", "items": {"enum": list(MODALITY_ORDER)}, "minItems": 1},
                "scales": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "ensemble_size": _POS,
                "n_folds": {"type": "integer", "minimum": 2},
                "train": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "batch_size": _POS,
                        "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "patience_epochs": _POS,
                        "max_epochs": _POS,
                        "pretrain_epochs": {"type": "integer", "minimum": 0},
                        "lr_pretrain": {"type": "number", "minimum": 0},
                        "lr_output": {"type": "number", "minimum": 0},
                        "lr_finetune": {"type": "number", "minimum": 0},
                        "lr_joint": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
    },
}


class ConfigValidationError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_document(doc: dict) -> None:
    """Raise ConfigValidationError carrying the JSON pointer of the first violation."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        pointer = "".join(f"/{p}" for p in err.absolute_path)
        raise ConfigValidationError(pointer, err.message)


@dataclass
class PipelineConfig:
    """Everything a run needs. The top-level seed drives every stage."""

    cohort: CohortSpec = field(default_factory=CohortSpec)
    atlas_targets: tuple = (500, 1000, 2000)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    output_dir: Path = Path("run")
    seed: int = 0
    preset: str = "desk"

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        self.atlas_targets = tuple(int(t) for t in self.atlas_targets)
        if not 0 <= self.seed <= U64:
            raise ConfigValidationError("/seed", "must be a 64-bit unsigned integer")
        if max(self.experiment.scales) >= len(self.atlas_targets):
            raise ConfigValidationError("/experiment/scales", f"scale {max(self.experiment.scales)} exceeds the "
                                        f"{len(self.atlas_targets)} atlas targets")
        self.cohort.seed = self.seed
        self.experiment.seed = self.seed
        self.experiment.cfg.seed = self.seed

    @classmethod
    def from_document(cls, doc: dict | None = None) -> "PipelineConfig":
        doc = doc or {}
        validate_document(doc)
        preset = doc.get("preset", "desk")
        full = _merge(PRESETS[preset], doc)
        exp = dict(full.get("experiment", {}))
        train = TrainConfig(**exp.pop("train", {}))
        for key in ("modalities", "scales"):
            if key in exp:
                exp[key] = tuple(exp[key])
        cohort = CohortSpec(**full.get("cohort", {}))
        return cls(
            cohort=cohort,
            atlas_targets=tuple(full["atlas"]["targets"]),
            experiment=ExperimentSpec(cfg=train, **exp),
            output_dir=Path(full.get("output_dir", "run")),
            seed=int(full.get("seed", 0)),
            preset=preset,
        )

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigValidationError("", f"invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigValidationError("", "top level must be an object")
        return cls.from_document(doc)

    @classmethod
    def desk(cls, **overrides) -> "PipelineConfig":
        return cls.from_document(overrides)

    def to_dict(self) -> dict:
        exp = self.experiment.to_dict()
        train = exp.pop("cfg")
        train.pop("seed")
        exp.pop("seed")
        exp["train"] = train
        cohort = self.cohort.to_dict()
        cohort.pop("seed")
        return {
            "preset": self.preset,
            "seed": self.seed,
            "cohort": cohort,
            "atlas": {"targets": list(self.atlas_targets)},
            "experiment": exp,
        }

    def config_hash(self) -> str:
        """SHA-256 of the canonical config; the output directory is not part of it."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def stamp(self, stage: str) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed, "stage": stage, "config": self.to_dict()}
