"""Per-case agreement metrics between two binary masks.

Seven metrics are produced for each (prediction, reference) pair: volumetric
similarity, absolute volume difference, Dice, precision, recall, the
symmetric 95th-percentile Hausdorff distance, and surface Dice at tolerance.

Empty masks are legitimate input (a rater may decline to segment anything):

* both empty: volume and overlap metrics are perfect, surface Dice is 1,
  HD95 is undefined;
* one empty: overlap metrics and surface Dice are 0, HD95 is undefined.

Distances are Euclidean between voxel centers in millimetres and are exact
(nearest-neighbour queries on a k-d tree), not distance-transform estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volgrid import BinaryMask, VoxelGrid

VS_EPSILON_ML = 1e-9
SOFT_DICE_SMOOTH = 1e-5
FOCAL_LOG_FLOOR = 1e-12
DEFAULT_TOLERANCE_MM = 5.0

METRIC_NAMES = ("vs", "avd_ml", "dice", "precision", "recall", "hd95_mm", "sdt")
BOUNDED_METRICS = ("vs", "dice", "precision", "recall", "sdt")

OK = "ok"
BOTH_EMPTY = "both-empty"
ONE_EMPTY = "one-empty"

_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


class GridMismatchError(ValueError):
    pass


def _check_pair(pred: VoxelGrid, ref: VoxelGrid) -> None:
    if not pred.same_geometry(ref):
        raise GridMismatchError(
            f"grids differ: dims {pred.dims} vs {ref.dims}, spacing {pred.spacing_mm} vs {ref.spacing_mm}"
        )


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred: BinaryMask, ref: BinaryMask) -> ConfusionCounts:
    _check_pair(pred, ref)
    p = pred.foreground
    r = ref.foreground
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def overlap_metrics(c: ConfusionCounts) -> Tuple[Tuple[float, float, float], str]:
    """Dice, precision and recall plus the empty-mask flag.

    Zero denominators never raise. When neither mask has foreground all three
    are 1 (flag ``both-empty``); when exactly one does they are 0 (flag
    ``one-empty``).
    """
    pred_n = c.tp + c.fp
    ref_n = c.tp + c.fn
    if pred_n == 0 and ref_n == 0:
        return (1.0, 1.0, 1.0), BOTH_EMPTY
    if pred_n == 0 or ref_n == 0:
        return (0.0, 0.0, 0.0), ONE_EMPTY
    dice = 2 * c.tp / (2 * c.tp + c.fn + c.fp)
    return (dice, c.tp / pred_n, c.tp / ref_n), OK


def volume_metrics(pred: BinaryMask, ref: BinaryMask) -> Tuple[float, float]:
    """Volumetric similarity and absolute volume difference in ml."""
    _check_pair(pred, ref)
    v_pred = pred.count() * pred.voxel_volume_mm3 / 1000.0
    v_ref = ref.count() * ref.voxel_volume_mm3 / 1000.0
    diff = abs(v_pred - v_ref)
    vs = 1.0 - diff / (v_pred + v_ref + VS_EPSILON_ML)
    return vs, diff


@dataclass(frozen=True)
class SurfaceSet:
    """Surface voxels of a mask as an ``(n, 3)`` index array."""

    voxels: np.ndarray
    spacing_mm: Tuple[float, float, float]

    def __len__(self) -> int:
        return len(self.voxels)

    def points_mm(self) -> np.ndarray:
        return self.voxels * np.asarray(self.spacing_mm)

    def as_set(self):
        return {tuple(int(i) for i in v) for v in self.voxels}


def surface_mask(mask: BinaryMask) -> np.ndarray:
    fg = mask.foreground
    # border_value=0 makes voxels on the array boundary surface voxels
    interior = ndimage.binary_erosion(fg, structure=_FACE_NEIGHBOURS, border_value=0)
    return fg & ~interior


def surface_extract(mask: BinaryMask) -> SurfaceSet:
    """Foreground voxels with at least one background (or out-of-array) face neighbour."""
    return SurfaceSet(np.argwhere(surface_mask(mask)), mask.spacing_mm)


def directed_distances(source: SurfaceSet, target: SurfaceSet) -> Optional[np.ndarray]:
    """Distance in mm from each ``source`` voxel to its nearest ``target`` voxel.

    Returns ``None`` when either set is empty.
    """
    if len(source) == 0 or len(target) == 0:
        return None
    tree = cKDTree(target.points_mm())
    dist, _ = tree.query(source.points_mm(), k=1)
    return np.asarray(dist, dtype=np.float64)


def _surface_distances(pred: BinaryMask, ref: BinaryMask):
    s_pred = surface_extract(pred)
    s_ref = surface_extract(ref)
    return directed_distances(s_pred, s_ref), directed_distances(s_ref, s_pred)


def hd95(pred: BinaryMask, ref: BinaryMask) -> Optional[float]:
    """Max of the two directed 95th percentiles; ``None`` if either mask is empty."""
    _check_pair(pred, ref)
    d_pr, d_rp = _surface_distances(pred, ref)
    if d_pr is None:
        return None
    return float(max(np.percentile(d_pr, 95), np.percentile(d_rp, 95)))


def _sdt_from_distances(d_pr, d_rp, tol_mm: float) -> float:
    hits = np.count_nonzero(d_pr <= tol_mm) + np.count_nonzero(d_rp <= tol_mm)
    return hits / (len(d_pr) + len(d_rp))


def surface_dice_at_tolerance(pred: BinaryMask, ref: BinaryMask, tol_mm: float = DEFAULT_TOLERANCE_MM) -> float:
    """Share of surface voxels (both masks) lying within ``tol_mm`` of the other surface."""
    if tol_mm < 0:
        raise ValueError(f"tolerance must be non-negative, got {tol_mm}")
    _check_pair(pred, ref)
    d_pr, d_rp = _surface_distances(pred, ref)
    if d_pr is None:
        both_empty = pred.count() == 0 and ref.count() == 0
        return 1.0 if both_empty else 0.0
    return _sdt_from_distances(d_pr, d_rp, tol_mm)


@dataclass
class MetricRecord:
    """All seven metrics for one rater pair.

    ``None`` marks an undefined value. ``flags`` maps every metric to ``"ok"``
    or the empty-mask condition that decided its value.
    """

    vs: Optional[float]
    avd_ml: Optional[float]
    dice: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    hd95_mm: Optional[float]
    sdt: Optional[float]
    flags: Dict[str, str] = field(default_factory=dict)

    def get(self, metric: str) -> Optional[float]:
        return getattr(self, metric)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in METRIC_NAMES}
        out["flags"] = dict(self.flags)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRecord":
        return cls(**{name: d.get(name) for name in METRIC_NAMES}, flags=dict(d.get("flags", {})))


def evaluate_pair(pred: BinaryMask, ref: BinaryMask, tol_mm: float = DEFAULT_TOLERANCE_MM) -> MetricRecord:
    """Evaluate ``pred`` against ``ref`` (precision/recall are direction-sensitive)."""
    _check_pair(pred, ref)
    if tol_mm < 0:
        raise ValueError(f"tolerance must be non-negative, got {tol_mm}")
    counts = confusion_counts(pred, ref)
    (dice, precision, recall), state = overlap_metrics(counts)
    vs, avd = volume_metrics(pred, ref)
    flags = dict.fromkeys(METRIC_NAMES, state)
    flags["vs"] = flags["avd_ml"] = OK if state == OK else state

    if state == OK:
        d_pr, d_rp = _surface_distances(pred, ref)
        hd = float(max(np.percentile(d_pr, 95), np.percentile(d_rp, 95)))
        sdt = _sdt_from_distances(d_pr, d_rp, tol_mm)
    else:
        hd = None
        sdt = 1.0 if state == BOTH_EMPTY else 0.0
    return MetricRecord(vs, avd, dice, precision, recall, hd, sdt, flags)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    gamma: float = 2.0
    dice_weight: float = 1.0
    focal_weight: float = 1.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def dice_focal_loss(prob: VoxelGrid, ref: BinaryMask, cfg: LossConfig = LossConfig()) -> float:
    """Forward value of the soft-Dice + focal training loss.

    The focal term is averaged over all voxels; the log is floored at 1e-12.
    """
    p = np.asarray(prob.data, dtype=np.float64)
    r = ref.foreground
    if p.shape != r.shape:
        raise GridMismatchError(f"probability dims {p.shape} differ from mask dims {r.shape}")
    if p.size and (p.min() < 0 or p.max() > 1 or np.isnan(p).any()):
        raise ValueError("probabilities must lie in [0, 1]")
    rf = r.astype(np.float64)
    soft_dice = (2 * np.sum(p * rf) + SOFT_DICE_SMOOTH) / (np.sum(p) + np.sum(rf) + SOFT_DICE_SMOOTH)
    p_t = np.where(r, p, 1.0 - p)
    alpha_t = np.where(r, cfg.alpha, 1.0 - cfg.alpha)
    focal = -alpha_t * (1.0 - p_t) ** cfg.gamma * np.log(np.maximum(p_t, FOCAL_LOG_FLOOR))
    return float(cfg.dice_weight * (1.0 - soft_dice) + cfg.focal_weight * focal.mean())
