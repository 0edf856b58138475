"""Symmetry channel: sagittal flip, rigid co-registration and resampling.

A :class:`RigidTransform` maps points of the moving image's physical space
into the fixed image's space::

    t(p) = R (p - center) + center + translation

with ``R`` built from three angles (about the depth, height and width axes,
applied in that order). Resampling pulls each target voxel center back
through ``t^-1``.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .volgrid import BinaryMask, GridGeometry, VoxelGrid, _interp_order

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _axis_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    if axis == 0:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == 1:
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigidTransform:
    """Six-parameter rigid transform in physical millimetres."""

    rotation_rad: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    center_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("rotation_rad", "translation_mm", "center_mm"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @classmethod
    def identity(cls, center_mm=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(center_mm=center_mm)

    @classmethod
    def from_params(cls, params: Sequence[float], center_mm) -> "RigidTransform":
        return cls(tuple(params[:3]), tuple(params[3:]), center_mm)

    @property
    def params(self) -> np.ndarray:
        return np.array(self.rotation_rad + self.translation_mm)

    def matrix(self) -> np.ndarray:
        a0, a1, a2 = self.rotation_rad
        return _axis_rotation(2, a2) @ _axis_rotation(1, a1) @ _axis_rotation(0, a0)

    def affine(self) -> Tuple[np.ndarray, np.ndarray]:
        """``(R, b)`` with ``t(p) = R p + b``."""
        r = self.matrix()
        c = np.asarray(self.center_mm)
        return r, c - r @ c + np.asarray(self.translation_mm)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        r = self.matrix()
        c = np.asarray(self.center_mm)
        return (pts - c) @ r.T + c + np.asarray(self.translation_mm)

    @classmethod
    def _from_affine(cls, r: np.ndarray, b: np.ndarray, center_mm) -> "RigidTransform":
        c = np.asarray(center_mm, dtype=np.float64)
        angles = Rotation.from_matrix(r).as_euler("xyz")
        return cls(tuple(angles), tuple(b - c + r @ c), tuple(c))

    def inverse(self) -> "RigidTransform":
        r, b = self.affine()
        return self._from_affine(r.T, -r.T @ b, self.center_mm)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        r1, b1 = self.affine()
        r2, b2 = other.affine()
        return self._from_affine(r1 @ r2, r1 @ b2 + b1, self.center_mm)

    def rotation_angle(self) -> float:
        """Total rotation angle in radians."""
        return float(Rotation.from_matrix(self.matrix()).magnitude())

    def to_dict(self) -> dict:
        return {
            "rotation_rad": list(self.rotation_rad),
            "translation_mm": list(self.translation_mm),
            "center_mm": list(self.center_mm),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(d["rotation_rad"], d["translation_mm"], d.get("center_mm", (0.0, 0.0, 0.0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


@dataclass(frozen=True)
class RegistrationOptions:
    """Coarse-to-fine optimizer settings.

    ``pyramid`` factors are relative to the finest voxel pitch; an axis is
    only subsampled where the factor exceeds its own pitch ratio.
    """

    pyramid: Tuple[int, ...] = (4, 2, 1)
    max_iterations: int = 8
    translation_tol_mm: float = 0.05
    rotation_tol_rad: float = 1e-3
    translation_range_mm: float = 14.0
    rotation_range_rad: float = math.radians(14.0)
    metric: str = "mse"

    def __post_init__(self):
        object.__setattr__(self, "pyramid", tuple(int(f) for f in self.pyramid))
        if not self.pyramid or any(f < 1 for f in self.pyramid):
            raise ValueError("pyramid factors must be positive")
        if list(self.pyramid) != sorted(self.pyramid, reverse=True) or self.pyramid[-1] != 1:
            raise ValueError("pyramid factors must descend to 1")
        if self.metric != "mse":
            raise ValueError("only the 'mse' metric is supported")


def flip_sagittal(grid: VoxelGrid) -> VoxelGrid:
    """Reverse the left-right (width) axis; geometry unchanged."""
    return grid.with_data(grid.data[:, :, ::-1])


def _index_affine(t: RigidTransform, target: GridGeometry, source: GridGeometry, stride=(1, 1, 1)):
    # output index o -> source index: A o + b
    r = t.matrix()
    c = np.asarray(t.center_mm)
    s_src = np.asarray(source.spacing_mm)
    s_tgt = np.asarray(target.spacing_mm) * np.asarray(stride)
    a = (r.T * s_tgt[None, :]) / s_src[:, None]
    rel_tgt = (np.asarray(target.origin_mm) - c) - np.asarray(t.translation_mm)
    b = (r.T @ rel_tgt - (np.asarray(source.origin_mm) - c)) / s_src
    return a, b


def resample_transform(grid: VoxelGrid, t: RigidTransform, target: Optional[GridGeometry] = None,
                       interp: str = "trilinear", fill: Optional[float] = None) -> VoxelGrid:
    """Sample ``grid`` on ``target`` (default: its own geometry) through ``t^-1``.

    Points falling outside ``grid`` take ``fill`` (default: the minimum intensity).
    """
    target = target or grid.geometry()
    order = _interp_order(interp)
    a, b = _index_affine(t, target, grid.geometry())
    data = grid.data if order == 0 else grid.data.astype(np.float64)
    if fill is None:
        fill = float(grid.data.min()) if grid.data.size else 0.0
    out = ndimage.affine_transform(data, a, offset=b, output_shape=tuple(target.dims), order=order,
                                   mode="constant", cval=fill)
    if isinstance(grid, BinaryMask):
        return BinaryMask((out > 0.5).astype(np.uint8), target.spacing_mm, target.origin_mm, grid.lr_sign)
    return VoxelGrid(out, target.spacing_mm, target.origin_mm, grid.lr_sign)


class _Level:
    """One pyramid level: subsampled fixed intensities and a smoothed moving image."""

    def __init__(self, moving: VoxelGrid, fixed: VoxelGrid, factor: int, fill: float):
        s_fixed = np.asarray(fixed.spacing_mm)
        finest = min(s_fixed.min(), min(moving.spacing_mm))
        self.stride = tuple(max(1, int(round(factor * finest / s))) for s in s_fixed)
        # one physical blur for both images so identical inputs score exactly zero at identity
        sigma_f = [0.5 * factor * finest / s if factor > 1 else 0.0 for s in s_fixed]
        sigma_m = [0.5 * factor * finest / s if factor > 1 else 0.0 for s in moving.spacing_mm]
        fixed_s = ndimage.gaussian_filter(fixed.data, sigma_f) if any(sigma_f) else fixed.data
        self.fixed = np.ascontiguousarray(fixed_s[:: self.stride[0], :: self.stride[1], :: self.stride[2]])
        self.moving = ndimage.gaussian_filter(moving.data, sigma_m) if any(sigma_m) else moving.data
        self.fixed_geom = fixed.geometry()
        self.moving_geom = moving.geometry()
        self.fill = fill
        self.n_evals = 0

    def cost(self, t: RigidTransform) -> float:
        self.n_evals += 1
        a, b = _index_affine(t, self.fixed_geom, self.moving_geom, self.stride)
        warped = ndimage.affine_transform(self.moving, a, offset=b, output_shape=self.fixed.shape, order=1,
                                          mode="constant", cval=self.fill)
        return float(np.mean((warped - self.fixed) ** 2))


def _golden_section(f, lo: float, hi: float, tol: float):
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN * (hi - lo)
            f2 = f(x2)
    return (x1, f1) if f1 <= f2 else (x2, f2)


def _zscore(data: np.ndarray) -> Optional[np.ndarray]:
    data = data.astype(np.float64)
    std = data.std()
    if std <= 1e-12 * max(1.0, float(np.abs(data).max())):
        return None
    return (data - data.mean()) / std


@dataclass
class RegistrationTrace:
    """Per-level cost before and after optimization."""

    levels: list = field(default_factory=list)


def rigid_register(moving: VoxelGrid, fixed: VoxelGrid, opts: RegistrationOptions = RegistrationOptions(),
                   trace: Optional[RegistrationTrace] = None) -> RigidTransform:
    """Rigid transform aligning ``moving`` onto ``fixed`` by mean-squared error.

    Each level cycles a golden-section line search over the six parameters
    until no parameter moves by more than its tolerance. A step is only kept
    if it lowers the cost, so every level ends no worse than it started.
    Rotation is about the physical center of ``fixed``.
    """
    center = tuple(fixed.center_mm)
    m = _zscore(moving.data)
    f = _zscore(fixed.data)
    if m is None or f is None:
        warnings.warn("zero-variance image; returning identity transform", RuntimeWarning, stacklevel=2)
        return RigidTransform.identity(center)
    moving_n = moving.with_data(m)
    fixed_n = fixed.with_data(f)
    fill = float(m.min())

    params = np.zeros(6)
    tols = np.array([opts.rotation_tol_rad] * 3 + [opts.translation_tol_mm] * 3)
    half = np.array([opts.rotation_range_rad] * 3 + [opts.translation_range_mm] * 3)
    for factor in opts.pyramid:
        level = _Level(moving_n, fixed_n, factor, fill)

        def cost_at(p):
            return level.cost(RigidTransform.from_params(p, center))

        best = cost_at(params)
        start_cost = best
        width = half.copy()
        for _ in range(opts.max_iterations):
            sweep_start = params.copy()
            for i in range(6):
                def cost_i(x, i=i):
                    trial = params.copy()
                    trial[i] = x
                    return cost_at(trial)

                x, fx = _golden_section(cost_i, params[i] - width[i], params[i] + width[i], tols[i])
                if fx < best:
                    params[i] = x
                    best = fx
            moved = params - sweep_start
            if np.all(np.abs(moved) < tols):
                break
            # line search along the sweep's net displacement
            step = np.max(np.abs(moved) / tols)
            a, fa = _golden_section(lambda a: cost_at(params + a * moved), -0.5, 1.5, 1.0 / step)
            if fa < best:
                params = params + a * moved
                best = fa
            width = np.clip(2.0 * np.abs(moved), half / 8.0, half)
        log.debug("level %d: cost %.6g -> %.6g (%d evals)", factor, start_cost, best, level.n_evals)
        if trace is not None:
            trace.levels.append({"factor": factor, "cost_before": start_cost, "cost_after": best,
                                 "evaluations": level.n_evals})
        half = np.maximum(half / 4.0, 8.0 * tols)
    return RigidTransform.from_params(params, center)


class MirrorResult(NamedTuple):
    mirror: VoxelGrid
    transform: RigidTransform


def _hemisphere_mask(grid: VoxelGrid, side: str) -> np.ndarray:
    """Boolean width-axis selector for the patient ``side`` of the physical midplane."""
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    width = grid.dims[2]
    k = np.arange(width)
    toward_right = (k - (width - 1) / 2.0) * grid.lr_sign
    return toward_right > 0 if side == "right" else toward_right < 0


def build_mirror_channel(image: VoxelGrid, opts: RegistrationOptions = RegistrationOptions(),
                         mode: str = "registered", side: Optional[str] = None) -> MirrorResult:
    """Mirror channel for ``image``.

    ``mode="registered"`` returns the flipped image rigidly co-registered onto
    the original. ``mode="hemisphere"`` keeps the original everywhere except
    the ``side`` hemisphere, which is replaced by the co-registered mirror.
    """
    if mode not in ("registered", "hemisphere"):
        raise ValueError(f"mode must be 'registered' or 'hemisphere', got {mode!r}")
    if mode == "hemisphere" and side is None:
        raise ValueError("hemisphere mode needs a side ('left' or 'right')")
    flipped = flip_sagittal(image)
    t = rigid_register(flipped, image, opts)
    mirrored = resample_transform(flipped, t, image.geometry())
    if mode == "registered":
        return MirrorResult(mirrored, t)
    replace = _hemisphere_mask(image, side)[None, None, :]
    spliced = np.where(replace, mirrored.data, image.data.astype(np.float64))
    return MirrorResult(image.with_data(spliced), t)


def stack_channels(image: VoxelGrid, mirror: VoxelGrid) -> np.ndarray:
    """Two-channel ``(2, depth, height, width)`` model input."""
    if not image.same_geometry(mirror):
        raise ValueError("image and mirror channel must share geometry")
    return np.stack([image.data.astype(np.float32), mirror.data.astype(np.float32)])
