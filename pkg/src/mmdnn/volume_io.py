"""Volumetric data model and the ``.svol`` file format.

An ``.svol`` file is one UTF-8 JSON header line followed by the raw voxel
payload as little-endian float32, x-fastest::

    {"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"f32","count":n}\\n
    <n * 4 bytes>
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_DTYPE = np.dtype("<f4")


class VolumeError(ValueError):
    """Base class for volume validation and format errors."""


class VolumeValidationError(VolumeError):
    """A Volume or RoiAtlas invariant is violated."""


class NonFiniteError(VolumeValidationError):
    """Voxel data contains NaN or Inf."""


class HeaderError(VolumeError):
    """The ``.svol`` header line is missing or malformed."""


class PayloadLengthError(VolumeError):
    """The payload size disagrees with the header dims."""


@dataclass(eq=False)
class Volume:
    """A 3-D scalar grid stored flat with x varying fastest.

    The value at ``(x, y, z)`` is ``data[x + nx * (y + ny * z)]``.
    """

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.data = np.ascontiguousarray(np.asarray(self.data).reshape(-1), dtype=np.float32)
        self.validate()

    def validate(self) -> None:
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise VolumeValidationError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing_mm) != 3 or not all(np.isfinite(s) and s > 0 for s in self.spacing_mm):
            raise VolumeValidationError(f"spacing_mm must be three positive reals, got {self.spacing_mm}")
        if self.data.size != self.n_voxels:
            raise VolumeValidationError(
                f"data length {self.data.size} != nx*ny*nz = {self.n_voxels}"
            )
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("data contains non-finite values")

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def grid(self) -> np.ndarray:
        """View of the data indexed as ``grid[x, y, z]``."""
        return self.data.reshape(self.dims, order="F")

    @classmethod
    def from_grid(cls, grid: np.ndarray, spacing_mm=(1.0, 1.0, 1.0)) -> "Volume":
        grid = np.asarray(grid)
        if grid.ndim != 3:
            raise VolumeValidationError(f"grid must be 3-D, got shape {grid.shape}")
        return cls(grid.shape, spacing_mm, grid.reshape(-1, order="F"))

    def coordinates(self) -> np.ndarray:
        """Integer (x, y, z) of every voxel in storage order, shape (n, 3)."""
        nx, ny, nz = self.dims
        idx = np.arange(self.n_voxels)
        return np.stack([idx % nx, (idx // nx) % ny, idx // (nx * ny)], axis=1)

    def same_geometry(self, other: "Volume") -> bool:
        return self.dims == other.dims and self.spacing_mm == other.spacing_mm

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing_mm == other.spacing_mm
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(eq=False)
class RoiAtlas:
    """Integer ROI label map (0 = background) over a template grid."""

    volume: Volume
    n_rois: int

    def __post_init__(self):
        self.n_rois = int(self.n_rois)
        if self.n_rois <= 0:
            raise VolumeValidationError(f"n_rois must be positive, got {self.n_rois}")
        data = self.volume.data
        labels = data.astype(np.int64)
        if not np.array_equal(labels, data):
            raise VolumeValidationError("ROI labels must be integers")
        if labels.min() < 0 or labels.max() > self.n_rois:
            raise VolumeValidationError(f"ROI labels must lie in [0, {self.n_rois}]")
        counts = np.bincount(labels, minlength=self.n_rois + 1)
        missing = np.flatnonzero(counts[1:] == 0) + 1
        if missing.size:
            raise VolumeValidationError(f"ROI labels with no voxels: {missing.tolist()}")
        self._labels = labels

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    def roi_sizes(self) -> np.ndarray:
        """Voxel count per ROI, indexed by ROI id (entry 0 is background)."""
        return np.bincount(self._labels, minlength=self.n_rois + 1)

    def __eq__(self, other):
        if not isinstance(other, RoiAtlas):
            return NotImplemented
        return self.n_rois == other.n_rois and self.volume == other.volume


def _header(vol: Volume) -> bytes:
    head = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing_mm),
        "dtype": "f32",
        "count": vol.n_voxels,
    }
    return (json.dumps(head, separators=(",", ":")) + "\n").encode("utf-8")


def write_volume(vol: Volume, path) -> None:
    vol.validate()
    payload = vol.data.astype(_DTYPE, copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(_header(vol))
        fh.write(payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise HeaderError(f"{path}: no header line")
    try:
        head = json.loads(raw[:newline].decode("utf-8"))
        dims = [int(d) for d in head["dims"]]
        spacing = [float(s) for s in head["spacing"]]
        dtype = head["dtype"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"{path}: malformed header ({exc})") from exc
    if dtype != "f32":
        raise HeaderError(f"{path}: unsupported dtype {dtype!r}")
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VolumeValidationError(f"{path}: dims must be three positive integers, got {dims}")
    n = dims[0] * dims[1] * dims[2]
    if "count" in head and int(head["count"]) != n:
        raise HeaderError(f"{path}: count {head['count']} disagrees with dims {dims}")
    payload = raw[newline + 1:]
    if len(payload) != 4 * n:
        raise PayloadLengthError(f"{path}: payload has {len(payload)} bytes, expected {4 * n}")
    data = np.frombuffer(payload, dtype=_DTYPE).astype(np.float32)
    return Volume(tuple(dims), tuple(spacing), data)


def write_roi_atlas(atlas: RoiAtlas, path) -> None:
    write_volume(atlas.volume, path)


def read_roi_atlas(path, n_rois: int | None = None) -> RoiAtlas:
    vol = read_volume(path)
    if n_rois is None:
        n_rois = int(vol.data.max())
    return RoiAtlas(vol, n_rois)
