"""Summary statistics and non-inferiority testing for agreement metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm, rankdata

DEFAULT_ALPHA = 0.05
DEFAULT_RESAMPLES = 10000
EXACT_MAX_N = 25

HIGHER_BETTER = "higher-better"
LOWER_BETTER = "lower-better"
BOUNDED_UNIT = "bounded-unit"
PHYSICAL_ML = "ml"
PHYSICAL_MM = "mm"


@dataclass(frozen=True)
class MetricMeta:
    name: str
    direction: str
    range: str


METRIC_META = {
    "vs": MetricMeta("vs", HIGHER_BETTER, BOUNDED_UNIT),
    "avd_ml": MetricMeta("avd_ml", LOWER_BETTER, PHYSICAL_ML),
    "dice": MetricMeta("dice", HIGHER_BETTER, BOUNDED_UNIT),
    "precision": MetricMeta("precision", HIGHER_BETTER, BOUNDED_UNIT),
    "recall": MetricMeta("recall", HIGHER_BETTER, BOUNDED_UNIT),
    "hd95_mm": MetricMeta("hd95_mm", LOWER_BETTER, PHYSICAL_MM),
    "sdt": MetricMeta("sdt", HIGHER_BETTER, BOUNDED_UNIT),
}


@dataclass(frozen=True)
class NonInferiorityMargin:
    bounded_unit: float = 0.2
    avd_ml: float = 3.0
    hd95_mm: float = 3.0

    def __post_init__(self):
        if min(self.bounded_unit, self.avd_ml, self.hd95_mm) < 0:
            raise ValueError("margins must be non-negative")

    def for_metric(self, meta: MetricMeta) -> float:
        return {BOUNDED_UNIT: self.bounded_unit, PHYSICAL_ML: self.avd_ml, PHYSICAL_MM: self.hd95_mm}[meta.range]


@dataclass
class NonInferiorityOutcome:
    metric: str
    n_pairs: int
    n_dropped: int
    p_raw: Optional[float]
    p_adjusted: Optional[float]
    significant: bool
    margin_used: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BootstrapSummary:
    median: float
    ci_lo: float
    ci_hi: float
    half_width: float
    n_resamples: int
    seed: int


def bootstrap_median_ci(values: Sequence[float], n_resamples: int = DEFAULT_RESAMPLES, seed: int = 0,
                        level: float = 0.95) -> BootstrapSummary:
    """Percentile bootstrap CI of the median, deterministic in ``seed``."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("bootstrap needs at least one value")
    if n_resamples < 1:
        raise ValueError("n_resamples must be positive")
    rng = np.random.default_rng(seed)
    medians = np.empty(n_resamples)
    chunk = max(1, 2_000_000 // x.size)
    for start in range(0, n_resamples, chunk):
        stop = min(start + chunk, n_resamples)
        idx = rng.integers(0, x.size, size=(stop - start, x.size))
        medians[start:stop] = np.median(x[idx], axis=1)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(medians, [tail, 100.0 - tail])
    med = float(np.median(x))
    # the resampled-median percentiles need not bracket the sample median
    lo, hi = min(float(lo), med), max(float(hi), med)
    return BootstrapSummary(med, lo, hi, max(med - lo, hi - med), n_resamples, seed)


def format_summary(summary: BootstrapSummary, digits: int = 2) -> str:
    """Render as ``"median ± half_width"``; the half-width drops trailing zeros."""
    hw = f"{summary.half_width:.{digits}f}".rstrip("0").rstrip(".")
    return f"{summary.median:.{digits}f} ± {hw or '0'}"


class UndefinedTestError(ValueError):
    """All differences are zero, so the signed-rank statistic has no distribution."""


@lru_cache(maxsize=None)
def _signed_rank_counts(n: int) -> Tuple[int, ...]:
    # counts[w] = number of sign patterns of ranks 1..n with positive-rank sum w
    counts = [1] + [0] * (n * (n + 1) // 2)
    top = 0
    for k in range(1, n + 1):
        top += k
        for w in range(top, k - 1, -1):
            counts[w] += counts[w - k]
    return tuple(counts)


def exact_upper_tail(w_plus: int, n: int) -> float:
    """P(W+ >= w_plus) under H0 for ``n`` untied ranks."""
    counts = _signed_rank_counts(n)
    if w_plus <= 0:
        return 1.0
    if w_plus >= len(counts):
        return 0.0
    return sum(counts[w_plus:]) / 2 ** n


def approx_upper_tail(w_plus: float, ranks: np.ndarray) -> float:
    """Normal approximation of P(W+ >= w_plus) with a fourth-cumulant term.

    Mean, variance and fourth cumulant are taken from the actual (mid)ranks,
    which is the usual tie correction. A continuity correction of 0.5 is used.
    The kurtosis term enters as a shift of z rather than an additive density
    term, which keeps far-tail values positive and monotone in ``w_plus``.
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    mean = ranks.sum() / 2.0
    var = np.sum(ranks ** 2) / 4.0
    if var <= 0:
        return 1.0
    kappa4 = -np.sum(ranks ** 4) / 8.0
    excess = kappa4 / var ** 2
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    z_adj = z - excess / 24.0 * (z ** 3 - 3.0 * z)
    return float(norm.sf(z_adj))


def wilcoxon_one_sided(diffs: Sequence[float]) -> Tuple[float, int]:
    """One-sided signed-rank test of H1: median(diff) > 0.

    Zero differences are dropped. Returns ``(p, n_used)``. The p-value is exact
    when at most 25 untied differences remain, and also when every remaining
    difference has the same sign (the tail then holds a single sign pattern
    whatever the ties). Otherwise the cumulant-corrected normal approximation
    is used.
    """
    d = np.asarray(diffs, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no differences given")
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise UndefinedTestError("all differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    n_pos = int(np.count_nonzero(d > 0))
    if n_pos == n:
        return 0.5 ** n, n
    if n_pos == 0:
        return 1.0, n
    tied = np.unique(np.abs(d)).size < n
    if n <= EXACT_MAX_N and not tied:
        return exact_upper_tail(int(round(w_plus)), n), n
    return approx_upper_tail(w_plus, ranks), n


def noninferiority_test(model_agreement: Sequence[Optional[float]], inter_agreement: Sequence[Optional[float]],
                        meta: MetricMeta, margins: NonInferiorityMargin = NonInferiorityMargin(),
                        alpha: float = DEFAULT_ALPHA) -> NonInferiorityOutcome:
    """Paired non-inferiority of model-expert vs inter-expert agreement.

    Per case the shifted difference is ``model - inter + margin`` (higher is
    better) or ``inter - model + margin`` (lower is better); H1 is that its
    median is positive. Pairs with an undefined value are dropped and counted.
    Differences within rounding of zero are treated as zero.
    """
    if len(model_agreement) != len(inter_agreement):
        raise ValueError("model and inter-expert vectors must be paired")
    margin = margins.for_metric(meta)
    pairs = [(m, i) for m, i in zip(model_agreement, inter_agreement) if m is not None and i is not None
             and not (isinstance(m, float) and math.isnan(m)) and not (isinstance(i, float) and math.isnan(i))]
    n_total = len(model_agreement)
    if len(pairs) < 2:
        raise ValueError(f"{meta.name}: fewer than 2 usable pairs")
    model = np.array([p[0] for p in pairs], dtype=np.float64)
    inter = np.array([p[1] for p in pairs], dtype=np.float64)
    if meta.direction == HIGHER_BETTER:
        diffs = model - inter + margin
    else:
        diffs = inter - model + margin
    scale = np.maximum.reduce([np.abs(model), np.abs(inter), np.full_like(model, margin), np.ones_like(model)])
    diffs[np.abs(diffs) <= 64 * np.finfo(float).eps * scale] = 0.0
    n_undefined = n_total - len(pairs)
    try:
        p, n_used = wilcoxon_one_sided(diffs)
    except UndefinedTestError:
        warnings.warn(f"{meta.name}: every difference equals the margin; test undefined, reported non-significant",
                      RuntimeWarning, stacklevel=2)
        return NonInferiorityOutcome(meta.name, 0, n_total, None, None, False, margin)
    n_dropped = n_undefined + (len(pairs) - n_used)
    return NonInferiorityOutcome(meta.name, n_used, n_dropped, p, None, p < alpha, margin)


def holm_adjust(p_values: Sequence[float]) -> List[float]:
    """Holm step-down adjusted p-values, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return []
    if ((p < 0) | (p > 1) | np.isnan(p)).any():
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = (m - np.arange(m)) * p[order]
    adjusted_sorted = np.minimum(1.0, np.maximum.accumulate(scaled))
    out = np.empty(m)
    out[order] = adjusted_sorted
    return out.tolist()


def apply_holm(outcomes: Sequence[NonInferiorityOutcome], alpha: float = DEFAULT_ALPHA) -> int:
    """Adjust every defined p-value in ``outcomes`` in place; returns the family size."""
    defined = [o for o in outcomes if o.p_raw is not None]
    adjusted = holm_adjust([o.p_raw for o in defined])
    for o, p_adj in zip(defined, adjusted):
        o.p_adjusted = p_adj
        o.significant = p_adj < alpha
    return len(defined)


class DegenerateRankError(ValueError):
    pass


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average-tie ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1D and of equal length")
    if x.size < 3:
        raise ValueError("spearman_rho needs at least 3 observations")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    sxx = np.dot(rx, rx)
    syy = np.dot(ry, ry)
    if sxx == 0 or syy == 0:
        raise DegenerateRankError("zero rank variance")
    return float(np.clip(np.dot(rx, ry) / math.sqrt(sxx * syy), -1.0, 1.0))
