"""Synthetic template, ROI atlas, and longitudinal cohorts in template space.

Disease is modelled as multiplicative shrinkage of the expansion map
(atrophy) and of PET uptake (hypometabolism) inside a fixed subset of
ROIs. Progressive subjects ramp linearly from no effect ``horizon_months``
before conversion to the full effect at conversion.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .featurize import GROUPS, PROGRESSIVE, SubjectScan
from .patch_atlas import KMeansParameterError, kmeans_spatial
from .volume_io import RoiAtlas, Volume, read_volume, write_volume

# Subject counts per group in the source cohort; a ratio profile only.
TABLE1_GROUP_COUNTS = {"sNC": 360, "sMCI": 409, "pNC": 18, "pMCI": 217, "sAD": 238}

DESK_GROUP_COUNTS = {"sNC": 50, "sMCI": 40, "pNC": 20, "pMCI": 40, "sAD": 50}

# (atrophy factor, hypometabolism factor); sMCI entries act on the nuisance ROIs
EFFECT_PRESETS = {
    "none": {g: (1.0, 1.0) for g in GROUPS},
    "moderate": {"sNC": (1.0, 1.0), "sMCI": (0.96, 0.96), "pNC": (0.9, 0.88),
                 "pMCI": (0.9, 0.88), "sAD": (0.9, 0.88)},
    "strong": {"sNC": (1.0, 1.0), "sMCI": (0.92, 0.92), "pNC": (0.8, 0.75),
               "pMCI": (0.8, 0.75), "sAD": (0.8, 0.75)},
}


class CohortParameterError(ValueError):
    pass


def scaled_group_counts(total: int, profile=TABLE1_GROUP_COUNTS) -> dict[str, int]:
    """Largest-remainder apportionment of ``total`` subjects over ``profile``."""
    weights = np.array([profile[g] for g in GROUPS], dtype=float)
    exact = weights / weights.sum() * total
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return dict(zip(GROUPS, counts.tolist()))


@dataclass
class CohortSpec:
    dims: tuple = (32, 32, 32)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    n_rois: int = 16
    group_counts: dict = field(default_factory=lambda: dict(DESK_GROUP_COUNTS))
    effect: dict = field(default_factory=lambda: dict(EFFECT_PRESETS["strong"]))
    affected_fraction: float = 0.25
    noise_sigma: float = 0.2
    subject_sigma: float = 0.04
    pet_gain_sigma: float = 0.1
    scans_per_subject: int = 2
    months_between_scans: int = 12
    horizon_months: int = 36
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if isinstance(self.effect, str):
            self.effect = dict(EFFECT_PRESETS[self.effect])
        self.effect = {g: tuple(float(v) for v in self.effect.get(g, (1.0, 1.0))) for g in GROUPS}
        self.group_counts = {g: int(self.group_counts.get(g, 0)) for g in GROUPS}
        self.validate()

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise CohortParameterError(f"dims must be three positive integers, got {self.dims}")
        if self.n_rois < 1:
            raise CohortParameterError("n_rois must be positive")
        if any(c < 0 for c in self.group_counts.values()):
            raise CohortParameterError("group counts must be non-negative")
        for g, factors in self.effect.items():
            if len(factors) != 2 or not all(0 < f <= 1 for f in factors):
                raise CohortParameterError(f"effect factors for {g} must lie in (0, 1], got {factors}")
        if not 0 < self.affected_fraction <= 1:
            raise CohortParameterError("affected_fraction must lie in (0, 1]")
        for name in ("noise_sigma", "subject_sigma", "pet_gain_sigma"):
            if getattr(self, name) < 0:
                raise CohortParameterError(f"{name} must be non-negative")
        if self.scans_per_subject < 1 or self.months_between_scans < 1 or self.horizon_months < 1:
            raise CohortParameterError("scan schedule parameters must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["spacing_mm"] = list(self.spacing_mm)
        d["effect"] = {g: list(v) for g, v in self.effect.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        return cls(**d)


def _rng(seed: int, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), *stream]))


def make_template(spec: CohortSpec) -> tuple[RoiAtlas, int]:
    """Partition a centred ellipsoid into ``n_rois`` compact ROIs.

    ROIs are Voronoi cells of spatial k-means on the foreground voxels,
    numbered by ascending centroid (z, y, x); ROI 1 is the most inferior and
    serves as the brainstem.
    """
    dims = np.array(spec.dims)
    centre = (dims - 1) / 2.0
    semi = np.maximum(dims * np.array([0.45, 0.47, 0.42]), 0.5)
    empty = Volume(spec.dims, spec.spacing_mm, np.zeros(int(np.prod(dims)), dtype=np.float32))
    coords = empty.coordinates()
    inside = (((coords - centre) / semi) ** 2).sum(axis=1) <= 1.0
    fg = np.flatnonzero(inside)
    if spec.n_rois > fg.size:
        raise CohortParameterError(f"n_rois={spec.n_rois} exceeds {fg.size} foreground voxels")
    try:
        assign = kmeans_spatial(coords[fg], spec.n_rois, int(_rng(spec.seed, 0).integers(2**63)), spec.spacing_mm)
    except KMeansParameterError as exc:
        raise CohortParameterError(str(exc)) from exc
    cents = np.array([coords[fg[assign == j]].mean(axis=0) for j in range(spec.n_rois)])
    order = np.lexsort((cents[:, 0], cents[:, 1], cents[:, 2]))
    remap = np.empty(spec.n_rois, dtype=np.int64)
    remap[order] = np.arange(1, spec.n_rois + 1)
    labels = np.zeros(empty.n_voxels, dtype=np.float32)
    labels[fg] = remap[assign]
    return RoiAtlas(Volume(spec.dims, spec.spacing_mm, labels), spec.n_rois), 1


@dataclass
class DiseaseLayout:
    brainstem: int
    ad_rois: list[int]
    nuisance_rois: list[int]
    base_pet: np.ndarray  # indexed by ROI id, entry 0 = background


def disease_layout(spec: CohortSpec, n_rois: int, brainstem: int) -> DiseaseLayout:
    """Which ROIs carry the AD signature and the sMCI nuisance signature."""
    rng = _rng(spec.seed, 1)
    candidates = [r for r in range(1, n_rois + 1) if r != brainstem]
    n_aff = min(len(candidates), max(1, int(round(spec.affected_fraction * n_rois)))) if candidates else 0
    perm = [candidates[i] for i in rng.permutation(len(candidates))]
    ad = sorted(perm[:n_aff])
    nuisance = sorted(perm[n_aff:2 * n_aff])
    base_pet = np.concatenate([[0.05], rng.uniform(0.8, 1.3, size=n_rois)])
    base_pet[brainstem] = 1.0
    return DiseaseLayout(brainstem, ad, nuisance, base_pet)


def effect_fraction(group: str, months_to_conversion: int | None, horizon: int) -> float:
    """Share of the full AD effect present in a scan (0 = none, 1 = full)."""
    if group == "sAD":
        return 1.0
    if group in PROGRESSIVE:
        return float(np.clip(1.0 - months_to_conversion / horizon, 0.0, 1.0))
    return 0.0


def _mean_one_lognormal(rng, sigma, size):
    if sigma == 0:
        return np.ones(size)
    return np.exp(sigma * rng.standard_normal(size) - 0.5 * sigma**2)


def subject_ids(spec: CohortSpec) -> list[tuple[str, str]]:
    out = []
    i = 0
    for g in GROUPS:
        for _ in range(spec.group_counts[g]):
            out.append((f"S{i:04d}", g))
            i += 1
    return out


def sample_subject(spec: CohortSpec, roi: RoiAtlas, layout: DiseaseLayout, index: int,
                   subject_id: str, group: str) -> list[SubjectScan]:
    rng = _rng(spec.seed, 2, index)
    labels = roi.labels
    n = roi.volume.n_voxels
    n_rois = roi.n_rois

    # subject-constant anatomy and baseline metabolism, per ROI; brainstem held at 1
    anat = _mean_one_lognormal(rng, spec.subject_sigma, n_rois + 1)
    meta = _mean_one_lognormal(rng, spec.subject_sigma, n_rois + 1)
    anat[[0, layout.brainstem]] = 1.0
    meta[[0, layout.brainstem]] = 1.0
    span = spec.horizon_months + spec.months_between_scans * (spec.scans_per_subject - 1)
    conversion = int(rng.integers(1, span + 1)) if group in PROGRESSIVE else None

    atrophy, hypo = spec.effect[group]
    scans = []
    for k in range(spec.scans_per_subject):
        month = k * spec.months_between_scans
        mtc = max(0, conversion - month) if conversion is not None else None
        exp_roi = anat.copy()
        pet_roi = layout.base_pet * meta
        if group == "sMCI":
            exp_roi[layout.nuisance_rois] *= atrophy
            pet_roi[layout.nuisance_rois] *= hypo
        else:
            f = effect_fraction(group, mtc, spec.horizon_months)
            exp_roi[layout.ad_rois] *= 1.0 - f * (1.0 - atrophy)
            pet_roi[layout.ad_rois] *= 1.0 - f * (1.0 - hypo)
        gain = _mean_one_lognormal(rng, spec.pet_gain_sigma, 1)[0]
        expansion = exp_roi[labels] * _mean_one_lognormal(rng, spec.noise_sigma, n)
        pet = gain * pet_roi[labels] * _mean_one_lognormal(rng, spec.noise_sigma, n)
        scans.append(SubjectScan(
            subject_id=subject_id,
            group=group,
            months_to_conversion=mtc,
            expansion=Volume(roi.volume.dims, roi.volume.spacing_mm, expansion),
            pet=Volume(roi.volume.dims, roi.volume.spacing_mm, pet),
            brainstem_roi_id=layout.brainstem,
            scan_month=month,
        ))
    return scans


def sample_cohort(spec: CohortSpec, roi: RoiAtlas, brainstem: int = 1) -> list[SubjectScan]:
    """All scans of all subjects, subjects ordered by group then index.

    Each subject draws from its own stream keyed by (seed, subject index),
    so output does not depend on generation order.
    """
    layout = disease_layout(spec, roi.n_rois, brainstem)
    scans = []
    for i, (sid, group) in enumerate(subject_ids(spec)):
        scans += sample_subject(spec, roi, layout, i, sid, group)
    return scans


def write_cohort(directory, spec: CohortSpec, roi: RoiAtlas, brainstem: int,
                 scans: list[SubjectScan], extra=None) -> Path:
    directory = Path(directory)
    (directory / "scans").mkdir(parents=True, exist_ok=True)
    write_volume(roi.volume, directory / "roi.svol")
    entries = []
    for s in scans:
        exp_name = f"scans/{s.scan_id}_expansion.svol"
        pet_name = f"scans/{s.scan_id}_pet.svol"
        write_volume(s.expansion, directory / exp_name)
        write_volume(s.pet, directory / pet_name)
        entries.append({
            "subject_id": s.subject_id, "scan_id": s.scan_id, "group": s.group,
            "scan_month": s.scan_month, "months_to_conversion": s.months_to_conversion,
            "expansion": exp_name, "pet": pet_name,
        })
    layout = disease_layout(spec, roi.n_rois, brainstem)
    manifest = {
        "spec": spec.to_dict(), "n_rois": roi.n_rois, "brainstem_roi_id": brainstem,
        "roi_atlas": "roi.svol", "ad_rois": layout.ad_rois, "nuisance_rois": layout.nuisance_rois,
        "scans": entries,
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_cohort(directory) -> tuple[RoiAtlas, int, list[SubjectScan]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    roi = RoiAtlas(read_volume(directory / manifest["roi_atlas"]), manifest["n_rois"])
    brainstem = manifest["brainstem_roi_id"]
    scans = [
        SubjectScan(
            subject_id=e["subject_id"], group=e["group"],
            months_to_conversion=e["months_to_conversion"],
            expansion=read_volume(directory / e["expansion"]),
            pet=read_volume(directory / e["pet"]),
            brainstem_roi_id=brainstem, scan_id=e["scan_id"], scan_month=e["scan_month"],
        )
        for e in manifest["scans"]
    ]
    return roi, brainstem, scans
