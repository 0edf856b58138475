"""Voxel grid data model and grid-level operations.

Arrays are indexed ``(depth, height, width)``; width is the left-right axis.
Physical position of voxel ``(i, j, k)`` is ``origin + (i, j, k) * spacing``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

Triple = Tuple[float, float, float]


def _as_triple(values: Sequence[float], name: str) -> Triple:
    values = tuple(float(v) for v in values)
    if len(values) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(values)}")
    return values  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Dense 3D volume with physical geometry.

    Parameters
    ----------
    data : ndarray
        3D array in ``(depth, height, width)`` order. Stored read-only.
    spacing_mm : triple of float
        Voxel pitch per axis, all strictly positive. Anisotropy is allowed.
    origin_mm : triple of float
        Physical position of voxel ``(0, 0, 0)``.
    lr_sign : int
        +1 if increasing width index points toward patient right, -1 otherwise.
    """

    data: np.ndarray
    spacing_mm: Triple = (1.0, 1.0, 1.0)
    origin_mm: Triple = (0.0, 0.0, 0.0)
    lr_sign: int = 1

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {data.shape}")
        spacing = _as_triple(self.spacing_mm, "spacing_mm")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if self.lr_sign not in (1, -1):
            raise ValueError("lr_sign must be +1 or -1")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", _as_triple(self.origin_mm, "origin_mm"))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    @property
    def voxel_volume_mm3(self) -> float:
        sz, sy, sx = self.spacing_mm
        return sz * sy * sx

    @property
    def center_mm(self) -> np.ndarray:
        """Physical center of the voxel-center lattice."""
        return np.asarray(self.origin_mm) + (np.asarray(self.dims) - 1) / 2.0 * np.asarray(self.spacing_mm)

    def geometry(self) -> "GridGeometry":
        return GridGeometry(self.dims, self.spacing_mm, self.origin_mm)

    def same_geometry(self, other: "VoxelGrid", atol: float = 1e-6) -> bool:
        return self.dims == other.dims and np.allclose(self.spacing_mm, other.spacing_mm, rtol=0, atol=atol)

    def with_data(self, data: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(data, self.spacing_mm, self.origin_mm, self.lr_sign)


@dataclass(frozen=True, eq=False)
class BinaryMask(VoxelGrid):
    """VoxelGrid whose values are exactly 0 or 1, stored as uint8."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            if data.size and not np.isin(data, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            object.__setattr__(self, "data", data.astype(np.uint8))
        elif data.size and data.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")
        super().__post_init__()

    @classmethod
    def from_indices(cls, dims, indices, spacing_mm=(1.0, 1.0, 1.0), origin_mm=(0.0, 0.0, 0.0)) -> "BinaryMask":
        data = np.zeros(dims, dtype=np.uint8)
        for idx in indices:
            data[tuple(idx)] = 1
        return cls(data, spacing_mm, origin_mm)

    @property
    def foreground(self) -> np.ndarray:
        return self.data.astype(bool)

    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def with_data(self, data: np.ndarray) -> "BinaryMask":
        return BinaryMask(data, self.spacing_mm, self.origin_mm, self.lr_sign)


@dataclass(frozen=True)
class GridGeometry:
    dims: Tuple[int, int, int]
    spacing_mm: Triple
    origin_mm: Triple = field(default=(0.0, 0.0, 0.0))


def binarize(grid: VoxelGrid, threshold: float = 0.5) -> BinaryMask:
    """Foreground wherever the value is strictly greater than ``threshold``."""
    return BinaryMask((grid.data > threshold).astype(np.uint8), grid.spacing_mm, grid.origin_mm, grid.lr_sign)


def volume_ml(mask: BinaryMask) -> float:
    """Foreground volume in millilitres (1 ml = 1000 mm^3)."""
    return mask.count() * mask.voxel_volume_mm3 / 1000.0


def normalize_ct(grid: VoxelGrid, lo_pct: float = 0.5, hi_pct: float = 99.5) -> VoxelGrid:
    """Percentile clipping followed by z-scoring.

    Percentiles are taken over every voxel with linear interpolation, so the
    result is unchanged by any positive affine rescaling of the intensities.
    A volume with zero variance after clipping maps to all zeros.
    """
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    values = grid.data.astype(np.float64)
    lo, hi = np.percentile(values, [lo_pct, hi_pct])
    clipped = np.clip(values, lo, hi)
    std = clipped.std()
    scale = max(abs(lo), abs(hi), 1.0)
    if std <= 1e-12 * scale:
        return grid.with_data(np.zeros_like(clipped))
    return grid.with_data((clipped - clipped.mean()) / std)


def resample(grid: VoxelGrid, new_spacing: Sequence[float], interp: str = "trilinear") -> VoxelGrid:
    """Resample onto a new voxel pitch covering the same field of view.

    The field of view is the union of voxel extents; output dims are
    ``round(dims * spacing / new_spacing)`` so the physical extent changes by
    less than one output voxel per axis. ``nearest`` keeps masks binary.
    """
    new_spacing = _as_triple(new_spacing, "new_spacing")
    if any(s <= 0 for s in new_spacing):
        raise ValueError(f"new spacing must be positive, got {new_spacing}")
    order = _interp_order(interp)
    old = np.asarray(grid.spacing_mm)
    new = np.asarray(new_spacing)
    if np.array_equal(old, new):
        return grid.with_data(grid.data)
    dims = np.asarray(grid.dims)
    new_dims = np.rint(dims * old / new).astype(int)
    if (new_dims < 1).any():
        raise ValueError(f"resampling {grid.dims} at {grid.spacing_mm} to {new_spacing} gives empty axis")
    # output voxel j sits at continuous input index (j*new + new/2 - old/2) / old
    axes = [(np.arange(n) * s_new + (s_new - s_old) / 2.0) / s_old for n, s_new, s_old in zip(new_dims, new, old)]
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(grid.data.astype(np.float64), coords, order=order, mode="nearest")
    new_origin = np.asarray(grid.origin_mm) - old / 2.0 + new / 2.0
    if isinstance(grid, BinaryMask):
        return BinaryMask((out > 0.5).astype(np.uint8), tuple(new), tuple(new_origin), grid.lr_sign)
    return VoxelGrid(out, tuple(new), tuple(new_origin), grid.lr_sign)


def _interp_order(interp: str) -> int:
    try:
        return {"nearest": 0, "trilinear": 1}[interp]
    except KeyError:
        raise ValueError(f"interp must be 'nearest' or 'trilinear', got {interp!r}") from None
