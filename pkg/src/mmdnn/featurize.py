"""Patch-wise features: expansion-weighted patch volume and normalized PET mean."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .patch_atlas import PatchAtlas
from .volume_io import RoiAtlas, Volume, VolumeValidationError

GROUPS = ("sNC", "sMCI", "pNC", "pMCI", "sAD")
PROGRESSIVE = ("pNC", "pMCI")
MODALITIES = ("volume", "pet")


class NormalizationError(ValueError):
    pass


@dataclass(eq=False)
class SubjectScan:
    subject_id: str
    group: str
    months_to_conversion: int | None
    expansion: Volume
    pet: Volume
    brainstem_roi_id: int
    scan_id: str = ""
    scan_month: int = 0

    def __post_init__(self):
        if self.group not in GROUPS:
            raise VolumeValidationError(f"unknown group {self.group!r}")
        if self.months_to_conversion is not None and self.months_to_conversion < 0:
            raise VolumeValidationError("months_to_conversion must be non-negative")
        if not self.expansion.same_geometry(self.pet):
            raise VolumeValidationError("expansion and pet geometry differ")
        if np.any(self.expansion.data <= 0):
            raise VolumeValidationError("expansion values must be strictly positive")
        if np.any(self.pet.data < 0):
            raise VolumeValidationError("pet values must be non-negative")
        if not self.scan_id:
            self.scan_id = f"{self.subject_id}_m{self.scan_month:03d}"


@dataclass
class FeatureSet:
    """Features of one scan: ``volume[s]`` and ``pet[s]`` per atlas scale."""

    subject_id: str
    scan_id: str
    group: str
    months_to_conversion: int | None
    volume: list[np.ndarray] = field(default_factory=list)
    pet: list[np.ndarray] = field(default_factory=list)


def _normalized_pet(pet: Volume, roi: RoiAtlas, brainstem_roi_id: int) -> np.ndarray:
    if not pet.same_geometry(roi.volume):
        raise VolumeValidationError("pet and ROI atlas geometry differ")
    mask = roi.labels == brainstem_roi_id
    if not mask.any():
        raise NormalizationError(f"brainstem ROI {brainstem_roi_id} is empty")
    data = pet.data.astype(np.float64)
    ref = float(data[mask].mean())
    if not ref > 0:
        raise NormalizationError(f"brainstem mean intensity {ref} is not positive")
    return data / ref


def normalize_pet(pet: Volume, roi: RoiAtlas, brainstem_roi_id: int) -> Volume:
    """Divide PET voxel-wise by its mean over the brainstem ROI."""
    return Volume(pet.dims, pet.spacing_mm, _normalized_pet(pet, roi, brainstem_roi_id))


def extract_features(scan: SubjectScan, atlas: PatchAtlas, roi: RoiAtlas) -> FeatureSet:
    """Per-scale patch volumes (sum of expansion x voxel volume) and PET means."""
    for name, vol in (("expansion", scan.expansion), ("pet", scan.pet)):
        if not vol.same_geometry(roi.volume):
            raise VolumeValidationError(f"{name} geometry {vol.dims} does not match ROI atlas {roi.volume.dims}")
    expansion = scan.expansion.data.astype(np.float64) * roi.volume.voxel_volume_mm3
    pet = _normalized_pet(scan.pet, roi, scan.brainstem_roi_id)

    fs = FeatureSet(scan.subject_id, scan.scan_id, scan.group, scan.months_to_conversion)
    for scale in atlas.scales:
        if scale.label_map.dims != roi.volume.dims:
            raise VolumeValidationError("patch atlas geometry does not match ROI atlas")
        labels = scale.labels
        n = scale.n_patches + 1
        counts = np.bincount(labels, minlength=n)[1:]
        fs.volume.append(np.bincount(labels, weights=expansion, minlength=n)[1:])
        fs.pet.append(np.bincount(labels, weights=pet, minlength=n)[1:] / counts)
    return fs


def write_feature_tables(features: list[FeatureSet], directory, n_patches: list[int], extra=None) -> Path:
    """One CSV per (scale, modality) plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for s, n in enumerate(n_patches):
        for modality in MODALITIES:
            name = f"{modality}_scale{s}.csv"
            with open(directory / name, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["subject_id", "scan_id", "group", "months_to_conversion"]
                           + [f"p{p}" for p in range(1, n + 1)])
                for fs in features:
                    vec = getattr(fs, modality)[s]
                    if len(vec) != n:
                        raise VolumeValidationError(f"{fs.scan_id}: {modality} scale {s} has {len(vec)} features, expected {n}")
                    mtc = "" if fs.months_to_conversion is None else str(fs.months_to_conversion)
                    w.writerow([fs.subject_id, fs.scan_id, fs.group, mtc] + [repr(float(v)) for v in vec])
            files.append({"scale": s, "modality": modality, "file": name, "n_features": n})
    manifest = {"n_patches": list(n_patches), "n_scans": len(features), "files": files}
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_feature_tables(directory) -> list[FeatureSet]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    n_scales = len(manifest["n_patches"])
    by_scan: dict[str, FeatureSet] = {}
    order = []
    for entry in manifest["files"]:
        with open(directory / entry["file"], newline="") as fh:
            rows = list(csv.reader(fh))
        for row in rows[1:]:
            subject_id, scan_id, group, mtc = row[:4]
            fs = by_scan.get(scan_id)
            if fs is None:
                fs = FeatureSet(subject_id, scan_id, group, int(mtc) if mtc else None,
                                [None] * n_scales, [None] * n_scales)
                by_scan[scan_id] = fs
                order.append(scan_id)
            getattr(fs, entry["modality"])[entry["scale"]] = np.array([float(v) for v in row[4:]])
    return [by_scan[s] for s in order]
