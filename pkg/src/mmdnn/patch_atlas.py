"""Spatial k-means subdivision of ROIs into multiscale patches."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume_io import RoiAtlas, Volume, VolumeValidationError, read_volume, write_volume

DEFAULT_TARGETS = (500, 1000, 2000)
MAX_ITER = 300
N_INIT = 10


class KMeansParameterError(ValueError):
    pass


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) squared distances; exact differences, not the expanded dot-product form,
    # so that ties are resolved identically on every platform
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # fewer distinct locations than clusters; repaired by the empty-cluster step
            centroids[j:] = centroids[0]
            break
        idx = rng.choice(n, p=closest / total)
        centroids[j] = points[idx]
        closest = np.minimum(closest, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _centroids(points, labels, k):
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, labels, points)
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / counts[:, None], counts


def _repair_empty(points, labels, k):
    """Move the point farthest from its centroid into each empty cluster."""
    while True:
        cents, counts = _centroids(points, labels, k)
        empty = np.flatnonzero(counts == 0)
        if not empty.size:
            return labels
        d = ((points - cents[labels]) ** 2).sum(axis=1)
        d[counts[labels] <= 1] = -1.0
        labels = labels.copy()
        labels[int(np.argmax(d))] = empty[0]


def clustering_cost(points: np.ndarray, labels: np.ndarray) -> float:
    """Sum of squared distances from each point to its cluster mean."""
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    k = int(labels.max()) + 1
    cents, _ = _centroids(points, labels, k)
    return float(((points - cents[labels]) ** 2).sum())


def lloyd_step(points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """One Lloyd update: recompute means, reassign to nearest (lowest index on ties)."""
    points = np.asarray(points, dtype=float)
    k = int(labels.max()) + 1
    cents, _ = _centroids(points, labels, k)
    return np.argmin(_sq_dists(points, cents), axis=1)


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = _plusplus_init(points, k, rng)
    labels = np.argmin(_sq_dists(points, centroids), axis=1)
    labels = _repair_empty(points, labels, k)
    for _ in range(MAX_ITER):
        centroids, _ = _centroids(points, labels, k)
        new = np.argmin(_sq_dists(points, centroids), axis=1)
        new = _repair_empty(points, new, k)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels


def kmeans_spatial(coords, k: int, seed: int, spacing=(1.0, 1.0, 1.0), n_init: int = N_INIT) -> np.ndarray:
    """Cluster voxel coordinates with k-means++ seeding and Lloyd iterations.

    Coordinates are scaled by ``spacing`` so clustering happens in physical
    space. ``n_init`` seeded restarts run and the lowest-cost result wins
    (the earliest restart on exact ties). Returns one cluster id in
    ``[0, k)`` per coordinate; every cluster is non-empty. Deterministic
    for a given ``seed``.
    """
    points = np.asarray(coords, dtype=float).reshape(-1, 3) * np.asarray(spacing, dtype=float)
    n = len(points)
    if n == 0:
        raise KMeansParameterError("cannot cluster an empty coordinate list")
    if not 1 <= k <= n:
        raise KMeansParameterError(f"k={k} must be in [1, {n}]")
    if n_init < 1:
        raise KMeansParameterError("n_init must be positive")
    if k == 1:
        return np.zeros(n, dtype=np.int64)

    best, best_cost = None, np.inf
    for child in np.random.SeedSequence(seed & (2**64 - 1)).spawn(n_init):
        labels = _lloyd(points, k, np.random.default_rng(child))
        cost = clustering_cost(points, labels)
        if cost < best_cost:
            best, best_cost = labels, cost
    return best


def patches_for_roi(n_voxels: int, target: int) -> int:
    return max(1, int(round(n_voxels / target)))


@dataclass(eq=False)
class PatchScale:
    target_voxels: int
    label_map: Volume
    n_patches: int
    patch_to_roi: dict[int, int] = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return self.label_map.data.astype(np.int64)

    def patch_sizes(self) -> np.ndarray:
        """Voxel count per patch, ordered by patch id 1..n_patches."""
        return np.bincount(self.labels, minlength=self.n_patches + 1)[1:]


@dataclass(eq=False)
class PatchAtlas:
    scales: list[PatchScale]

    @property
    def n_patches(self) -> list[int]:
        return [s.n_patches for s in self.scales]

    def __eq__(self, other):
        if not isinstance(other, PatchAtlas) or len(self.scales) != len(other.scales):
            return NotImplemented
        return all(
            a.target_voxels == b.target_voxels
            and a.n_patches == b.n_patches
            and a.patch_to_roi == b.patch_to_roi
            and a.label_map == b.label_map
            for a, b in zip(self.scales, other.scales)
        )


def _roi_seed(seed: int, scale_index: int, roi_id: int) -> int:
    ss = np.random.SeedSequence([seed & (2**64 - 1), scale_index, roi_id])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def build_patch_atlas(roi: RoiAtlas, targets=DEFAULT_TARGETS, seed: int = 0, jobs: int = 1) -> PatchAtlas:
    """Split every ROI into ``max(1, round(|ROI| / target))`` patches per target.

    Each (scale, ROI) clustering job gets its own seed derived from
    ``(seed, scale index, roi id)``, and patch ids are assigned in ROI order,
    so the result does not depend on ``jobs``.
    """
    targets = [int(t) for t in targets]
    if not targets or any(t < 1 for t in targets):
        raise VolumeValidationError(f"targets must be non-empty positive integers, got {targets}")
    labels = roi.labels
    coords = roi.volume.coordinates()
    members = [np.flatnonzero(labels == r) for r in range(1, roi.n_rois + 1)]
    spacing = roi.volume.spacing_mm

    scales = []
    for si, target in enumerate(targets):
        def job(r, si=si, target=target):
            idx = members[r - 1]
            if idx.size == 0:
                raise VolumeValidationError(f"ROI {r} has no voxels")
            k = patches_for_roi(idx.size, target)
            return kmeans_spatial(coords[idx], k, _roi_seed(seed, si, r), spacing), k

        rois = range(1, roi.n_rois + 1)
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(job, rois))
        else:
            results = [job(r) for r in rois]

        patch = np.zeros(roi.volume.n_voxels, dtype=np.float32)
        patch_to_roi = {}
        next_id = 1
        for r, (assign, k) in zip(rois, results):
            patch[members[r - 1]] = assign + next_id
            for p in range(next_id, next_id + k):
                patch_to_roi[p] = r
            next_id += k
        label_map = Volume(roi.volume.dims, roi.volume.spacing_mm, patch)
        scales.append(PatchScale(target, label_map, next_id - 1, patch_to_roi))
    return PatchAtlas(scales)


def save_patch_atlas(atlas: PatchAtlas, directory) -> list[Path]:
    """Write one ``.svol`` label map plus a JSON sidecar per scale."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, scale in enumerate(atlas.scales):
        vol_path = directory / f"scale_{i}.svol"
        side_path = directory / f"scale_{i}.json"
        write_volume(scale.label_map, vol_path)
        sidecar = {
            "target": scale.target_voxels,
            "n_patches": scale.n_patches,
            "patch_to_roi": {str(p): r for p, r in sorted(scale.patch_to_roi.items())},
        }
        side_path.write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
        written += [vol_path, side_path]
    return written


def load_patch_atlas(directory) -> PatchAtlas:
    directory = Path(directory)
    scales = []
    i = 0
    while (directory / f"scale_{i}.json").exists():
        side = json.loads((directory / f"scale_{i}.json").read_text())
        label_map = read_volume(directory / f"scale_{i}.svol")
        p2r = {int(p): int(r) for p, r in side["patch_to_roi"].items()}
        scales.append(PatchScale(int(side["target"]), label_map, int(side["n_patches"]), p2r))
        i += 1
    if not scales:
        raise FileNotFoundError(f"no patch atlas scales found in {directory}")
    return PatchAtlas(scales)
