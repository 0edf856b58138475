"""Study defaults shared by the library entry points and the CLI."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import DEFAULT_TOLERANCE_MM
from .stats import DEFAULT_ALPHA, DEFAULT_RESAMPLES, NonInferiorityMargin

OUT_DIR_ENV = "SEGAGREE_OUT"

STUDY_COHORT_SIZE = 232
SPLIT_N_TEST = 32
SPLIT_K_FOLDS = 5


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_DIR_ENV) or "segagree-out")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    tolerance_mm: float = DEFAULT_TOLERANCE_MM
    margins: NonInferiorityMargin = field(default_factory=NonInferiorityMargin)
    alpha: float = DEFAULT_ALPHA
    n_resamples: int = DEFAULT_RESAMPLES
    out_dir: Path = field(default_factory=default_out_dir)
    n_test: int = SPLIT_N_TEST
    k_folds: int = SPLIT_K_FOLDS

    def __post_init__(self):
        if self.tolerance_mm < 0:
            raise ValueError("tolerance must be non-negative")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_resamples < 1:
            raise ValueError("n_resamples must be positive")
