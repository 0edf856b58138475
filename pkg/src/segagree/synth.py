"""Synthetic lesions, rater perturbations and multi-rater cohorts.

Everything here is a pure function of its specs and seeds so cohorts can be
regenerated byte for byte.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volgrid import BinaryMask, VoxelGrid


@dataclass(frozen=True)
class LesionSpec:
    dims: Tuple[int, int, int] = (24, 64, 64)
    spacing_mm: Tuple[float, float, float] = (3.0, 1.0, 1.0)
    n_ellipsoids: int = 2
    radius_range_mm: Tuple[float, float] = (5.0, 12.0)
    center_jitter_mm: float = 8.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.radius_range_mm
        if lo <= 0 or hi < lo:
            raise ValueError(f"radius range must be positive and ordered, got {self.radius_range_mm}")
        if self.n_ellipsoids < 0:
            raise ValueError("n_ellipsoids must be non-negative")


@dataclass(frozen=True)
class RaterSpec:
    """How one rater departs from the true lesion.

    The signed radius (mm) is drawn from N(radius_mean_mm, radius_sd_mm);
    positive dilates, negative erodes. ``offset_mm`` shifts the whole mask by
    that distance in a random direction.
    """

    radius_mean_mm: float = 0.0
    radius_sd_mm: float = 0.0
    flip_prob: float = 0.0
    empty_prob: float = 0.0
    offset_mm: float = 0.0

    def __post_init__(self):
        for name in ("flip_prob", "empty_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.radius_sd_mm < 0 or self.offset_mm < 0:
            raise ValueError("radius_sd_mm and offset_mm must be non-negative")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from integers and strings."""
    words = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(2, np.uint64)[0] >> np.uint64(1))


def _physical_axes(dims, spacing):
    return [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(dims, spacing)]


def generate_lesion(spec: LesionSpec) -> BinaryMask:
    """Union of axis-aligned ellipsoids around the grid center."""
    rng = np.random.default_rng(spec.seed)
    z, y, x = np.meshgrid(*_physical_axes(spec.dims, spec.spacing_mm), indexing="ij")
    out = np.zeros(spec.dims, dtype=bool)
    for _ in range(spec.n_ellipsoids):
        center = rng.uniform(-spec.center_jitter_mm, spec.center_jitter_mm, 3)
        radii = rng.uniform(*spec.radius_range_mm, 3)
        out |= ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + (
            (x - center[2]) / radii[2]) ** 2 <= 1.0
    return BinaryMask(out.astype(np.uint8), spec.spacing_mm)


def dilate_mm(mask: BinaryMask, radius_mm: float) -> np.ndarray:
    """Dilation by a physical ball: voxels within ``radius_mm`` of the foreground."""
    fg = mask.foreground
    if radius_mm <= 0 or not fg.any():
        return fg.copy()
    return ndimage.distance_transform_edt(~fg, sampling=mask.spacing_mm) <= radius_mm


def erode_mm(mask: BinaryMask, radius_mm: float) -> np.ndarray:
    """Erosion by a physical ball; outside the array counts as background."""
    fg = mask.foreground
    if radius_mm <= 0 or not fg.any():
        return fg.copy()
    pad = [int(np.ceil(radius_mm / s)) + 1 for s in mask.spacing_mm]
    padded = np.pad(fg, [(p, p) for p in pad])
    dist = ndimage.distance_transform_edt(padded, sampling=mask.spacing_mm)
    core = dist > radius_mm
    return core[pad[0]:-pad[0], pad[1]:-pad[1], pad[2]:-pad[2]]


def perturb_rater(mask: BinaryMask, spec: RaterSpec, seed: int) -> BinaryMask:
    """One rater's version of ``mask``: optional empty output, shift, morphology, boundary flips."""
    rng = np.random.default_rng(seed)
    # every draw happens unconditionally so the stream layout is fixed
    empty = rng.random() < spec.empty_prob
    radius = rng.normal(spec.radius_mean_mm, spec.radius_sd_mm) if spec.radius_sd_mm > 0 else spec.radius_mean_mm
    direction = rng.normal(size=3)
    if empty:
        return mask.with_data(np.zeros(mask.dims, dtype=np.uint8))

    work = mask
    if spec.offset_mm > 0:
        direction /= np.linalg.norm(direction)
        shift = np.rint(direction * spec.offset_mm / np.asarray(mask.spacing_mm)).astype(int)
        work = mask.with_data(ndimage.shift(mask.data, shift, order=0, mode="constant", cval=0))
    if radius > 0:
        fg = dilate_mm(work, radius)
    elif radius < 0:
        fg = erode_mm(work, -radius)
    else:
        fg = work.foreground.copy()

    if spec.flip_prob > 0 and fg.any():
        inner = fg & ~ndimage.binary_erosion(fg, border_value=0)
        outer = ndimage.binary_dilation(fg) & ~fg
        band = inner | outer
        flips = band & (rng.random(fg.shape) < spec.flip_prob)
        fg = fg ^ flips
    return mask.with_data(fg.astype(np.uint8))


def structured_phantom(dims=(32, 64, 64), spacing=(3.0, 2.0, 2.0), symmetric: bool = False,
                       blob: Optional[Tuple[float, float, float, float, float]] = None) -> VoxelGrid:
    """Smooth head-like intensity phantom for registration tests.

    A soft ellipsoidal "head" carries Gaussian inclusions. With
    ``symmetric=True`` the inclusions are mirrored across the width midplane so
    the volume is exactly left-right symmetric. ``blob`` adds one extra
    inclusion ``(z, y, x, radius, amplitude)`` in mm relative to the center.
    """
    z, y, x = np.meshgrid(*_physical_axes(dims, spacing), indexing="ij")
    head = 1.0 / (1.0 + np.exp(((z / 26.0) ** 2 + (y / 40.0) ** 2 + (x / 34.0) ** 2 - 1.0) * 12.0))
    img = 100.0 * head
    inclusions = [(5, 10, -15, 6, 40), (-10, -15, 12, 8, -30), (12, -5, 20, 5, 60), (0, 20, 5, 7, 25),
                  (-15, 5, -20, 5, -20)]
    if symmetric:
        inclusions = inclusions + [(cz, cy, -cx, r, a) for cz, cy, cx, r, a in inclusions]
    for cz, cy, cx, r, a in inclusions:
        img += a * np.exp(-((z - cz) ** 2 + (y - cy) ** 2 + (x - cx) ** 2) / (2.0 * r * r))
    if symmetric:
        img = 0.5 * (img + img[:, :, ::-1])
    if blob is not None:
        # added after symmetrization so it stays on one side
        cz, cy, cx, r, a = blob
        img += a * np.exp(-((z - cz) ** 2 + (y - cy) ** 2 + (x - cx) ** 2) / (2.0 * r * r))
    return VoxelGrid(img, spacing)


_EXPERT = RaterSpec(radius_mean_mm=0.0, radius_sd_mm=2.0, flip_prob=0.3, offset_mm=4.0)

# experts disagree by a few millimetres; the model tracks the truth more tightly
DEFAULT_RATERS: Dict[str, RaterSpec] = {
    "A": _EXPERT,
    "B": _EXPERT,
    "C": _EXPERT,
    "Model": RaterSpec(radius_mean_mm=0.0, radius_sd_mm=1.0, flip_prob=0.1, offset_mm=2.0),
}


def generate_cohort(n_cases: int, lesion: LesionSpec, raters: Mapping[str, RaterSpec], seed: int,
                    out_dir, training_rater: str = "A", test_raters: Sequence[str] = ("B", "C"),
                    model: str = "Model", fmt: str = "nii"):
    """Write one mask per rater per case plus ``manifest.json``.

    Case ``i`` draws its lesion from ``derive_seed(seed, i)`` and each rater's
    perturbation from ``derive_seed(seed, i, rater_id)``.
    """
    from .cohort import CaseEntry, Manifest
    from .io import save_volume

    if n_cases < 1:
        raise ValueError("n_cases must be at least 1")
    suffix = {"nii": ".nii", "nii.gz": ".nii.gz", "raw": ".json"}.get(fmt)
    if suffix is None:
        raise ValueError(f"unknown format {fmt!r}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    rater_ids = list(raters)
    cases = []
    for i in range(n_cases):
        case_id = f"case_{i:03d}"
        truth = generate_lesion(LesionSpec(**{**asdict(lesion), "seed": derive_seed(seed, i)}))
        paths = {}
        for rater_id in rater_ids:
            rmask = perturb_rater(truth, raters[rater_id], derive_seed(seed, i, rater_id))
            rel = Path(case_id) / f"{rater_id}{suffix}"
            save_volume(rmask, out_dir / rel)
            paths[rater_id] = rel.as_posix()
        cases.append(CaseEntry(case_id, paths))
    manifest = Manifest(cases, rater_ids, training_rater, list(test_raters), model, base_dir=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
