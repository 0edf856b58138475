"""Agreement metrics and non-inferiority testing for 3D lesion segmentations."""

from .metrics import MetricRecord, evaluate_pair
from .stats import NonInferiorityMargin, holm_adjust, noninferiority_test, wilcoxon_one_sided
from .volgrid import BinaryMask, VoxelGrid, binarize, volume_ml

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "MetricRecord",
    "NonInferiorityMargin",
    "VoxelGrid",
    "binarize",
    "evaluate_pair",
    "holm_adjust",
    "noninferiority_test",
    "volume_ml",
    "wilcoxon_one_sided",
]
