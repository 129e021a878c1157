"""Channelled voxel volumes laid out as dense (X, Y, Z, C) float64 arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError
from .formats import VOLUME_MAGIC, load_arrays, save_arrays
from .geometry import GridSpec


@dataclass
class VoxelVolume:
    """A dense grid of per-voxel channel vectors.

    ``data`` has shape ``dims + (channels,)`` and must be finite.  Instances
    are cheap wrappers; use :meth:`copy` before mutating shared volumes.
    """

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[:3] != self.grid.dims:
            raise DomainError(
                f"data shape {self.data.shape} does not match grid dims {self.grid.dims}"
            )
        if self.data.shape[3] < 1:
            raise DomainError("volume needs at least one channel")
        if not np.all(np.isfinite(self.data)):
            raise DomainError("volume data must be finite")

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @classmethod
    def zeros(cls, grid: GridSpec, channels: int) -> "VoxelVolume":
        return cls(grid, np.zeros(grid.dims + (int(channels),)))

    @classmethod
    def full(cls, grid: GridSpec, channels: int, value: float) -> "VoxelVolume":
        return cls(grid, np.full(grid.dims + (int(channels),), float(value)))

    def copy(self) -> "VoxelVolume":
        return VoxelVolume(self.grid, self.data.copy())


# ---------------------------------------------------------------------------
# Snapshots (deterministic binary containers).


def grid_entries(grid: GridSpec, prefix: str = "grid") -> dict:
    """Named arrays encoding a grid spec inside a container file."""
    return {
        f"{prefix}.origin": np.asarray(grid.origin, dtype=np.float64),
        f"{prefix}.voxel_size": np.array([grid.voxel_size]),
        f"{prefix}.dims": np.asarray(grid.dims, dtype=np.int64),
    }


def grid_from_entries(entries: dict, prefix: str = "grid") -> GridSpec:
    try:
        return GridSpec(
            tuple(entries[f"{prefix}.origin"]),
            float(entries[f"{prefix}.voxel_size"][0]),
            tuple(int(d) for d in entries[f"{prefix}.dims"]),
        )
    except KeyError as exc:
        raise FormatError(f"snapshot is missing grid entry {exc}") from exc


def save_volume(path, vol: VoxelVolume) -> None:
    """Persist one volume (grid spec plus channel data)."""
    named = grid_entries(vol.grid)
    named["data"] = vol.data
    save_arrays(path, VOLUME_MAGIC, named)


def load_volume(path) -> VoxelVolume:
    entries = load_arrays(path, VOLUME_MAGIC)
    if "data" not in entries:
        raise FormatError("volume snapshot has no data entry")
    return VoxelVolume(grid_from_entries(entries), entries["data"])
