import warnings

import numpy as np
import pytest
import scipy.stats
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import enumerate_tail, recursion_tail_table
from segagree.stats import (
    EXACT_MAX_N,
    METRIC_META,
    DegenerateRankError,
    NonInferiorityMargin,
    UndefinedTestError,
    apply_holm,
    approx_upper_tail,
    bootstrap_median_ci,
    exact_upper_tail,
    format_summary,
    holm_adjust,
    noninferiority_test,
    spearman_rho,
    wilcoxon_one_sided,
)


# --- Wilcoxon -------------------------------------------------------------------

def test_wilcoxon_hand_examples():
    assert wilcoxon_one_sided([1, 2, 3, 4, 5]) == (1 / 32, 5)
    assert wilcoxon_one_sided([-1, 2, 3, 4, 5]) == (2 / 32, 5)
    p, _ = wilcoxon_one_sided([-1, -2, -3, -4, -5])
    assert p >= 0.96875


def test_wilcoxon_drops_zeros_and_signals_all_zero():
    assert wilcoxon_one_sided([0, 0, 1, 2, 3, 4, 5]) == (1 / 32, 5)
    with pytest.raises(UndefinedTestError):
        wilcoxon_one_sided([0.0, 0.0, 0.0])


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(-30, 30), min_size=1, max_size=12))
def test_exact_matches_enumeration(values):
    d = np.asarray(values, dtype=float)
    assume((d != 0).any())
    nz = d[d != 0]
    assume(np.unique(np.abs(nz)).size == nz.size)
    p, n = wilcoxon_one_sided(d)
    assert n == nz.size
    assert p == enumerate_tail(d)


def test_exact_matches_enumeration_every_statistic():
    for n in range(1, 13):
        table = recursion_tail_table(n)
        for w in range(n * (n + 1) // 2 + 1):
            assert exact_upper_tail(w, n) == table[w]


def test_exact_agrees_with_scipy(rng):
    for n in range(5, EXACT_MAX_N + 1):
        d = rng.normal(0.3, 1, n)
        ref = scipy.stats.wilcoxon(d, alternative="greater", method="exact").pvalue
        assert wilcoxon_one_sided(d)[0] == pytest.approx(ref, rel=1e-12)


def test_normal_approximation_close_to_exact():
    for n in range(26, 41):
        table = recursion_tail_table(n)
        ranks = np.arange(1, n + 1, dtype=float)
        worst = max(abs(approx_upper_tail(w, ranks) - table[w]) for w in range(len(table)))
        assert worst <= 1e-3, (n, worst)


def test_large_tie_free_sample_uses_approximation(rng):
    for n in range(26, 41):
        d = rng.permutation(np.arange(1, n + 1)) * rng.choice([-1, 1], n)
        d[0] = -abs(d[0])
        w = int(d[d > 0].sum())  # |d| is a permutation of 1..n, so |d| is its own rank
        p, _ = wilcoxon_one_sided(d)
        assert abs(p - recursion_tail_table(n)[w]) <= 1e-3


def test_all_positive_tail_is_exact_any_n():
    p, n = wilcoxon_one_sided(np.full(32, 0.2))
    assert n == 32 and p == 2.0 ** -32
    assert p == pytest.approx(2.33e-10, rel=1e-2)
    assert wilcoxon_one_sided(-np.arange(1, 41))[0] == 1.0


def test_tied_approximation_stays_positive():
    d = np.r_[np.full(30, 0.5), -0.1]
    p, n = wilcoxon_one_sided(d)
    assert n == 31 and 0 < p < 1e-6


def test_tie_corrected_approximation_matches_scipy(rng):
    d = np.round(rng.normal(0.2, 1, 40), 1)
    d = d[d != 0]
    ref = scipy.stats.wilcoxon(d, alternative="greater", method="approx", correction=True).pvalue
    assert wilcoxon_one_sided(d)[0] == pytest.approx(ref, abs=2e-3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=2, max_size=40), st.integers(1, 1000))
def test_wilcoxon_scale_invariant(values, factor):
    assume(any(values))
    d = np.asarray(values, dtype=float)
    assert wilcoxon_one_sided(d) == wilcoxon_one_sided(d * factor)


# --- non-inferiority ---------------------------------------------------------------

def test_noninferiority_identical_vectors():
    vals = list(np.linspace(0.3, 0.9, 32))
    out = noninferiority_test(vals, vals, METRIC_META["dice"])
    assert out.p_raw == 2.0 ** -32 and out.significant and out.n_pairs == 32 and out.n_dropped == 0
    assert out.margin_used == 0.2


def test_noninferiority_exactly_at_margin_is_undefined():
    inter = [0.5] * 10
    model = [0.25] * 10  # 0.5 - 0.25 - 0.25 == 0 exactly in binary floating point
    with pytest.warns(RuntimeWarning):
        out = noninferiority_test(model, inter, METRIC_META["dice"], NonInferiorityMargin(bounded_unit=0.25))
    assert out.p_raw is None and not out.significant and out.n_dropped == 10


def test_noninferiority_margin_rounding_counts_as_zero():
    inter = list(np.linspace(0.3, 0.9, 12))
    model = [v - 0.2 for v in inter]
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        out = noninferiority_test(model, inter, METRIC_META["sdt"])
    assert out.p_raw is None and not out.significant


def test_noninferiority_direction_and_margins():
    m = NonInferiorityMargin()
    assert (m.bounded_unit, m.avd_ml, m.hd95_mm) == (0.2, 3.0, 3.0)
    inter = [5.0] * 8
    worse = [9.0] * 8  # lower-better metric 4 mm worse than inter: beyond the 3 mm margin
    out = noninferiority_test(worse, inter, METRIC_META["hd95_mm"])
    assert out.margin_used == 3.0 and out.p_raw == 1.0 and not out.significant
    out = noninferiority_test([6.0] * 8, inter, METRIC_META["avd_ml"])
    assert out.margin_used == 3.0 and out.p_raw == 2.0 ** -8


def test_noninferiority_drops_undefined_pairs():
    model = [0.8, None, 0.7, float("nan"), 0.9]
    inter = [0.7, 0.6, None, 0.5, 0.6]
    out = noninferiority_test(model, inter, METRIC_META["dice"])
    assert out.n_pairs == 2 and out.n_dropped == 3
    with pytest.raises(ValueError):
        noninferiority_test([0.5, None], [0.5, 0.5], METRIC_META["dice"])
    with pytest.raises(ValueError):
        noninferiority_test([0.5], [0.5, 0.5], METRIC_META["dice"])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 64), st.integers(0, 64)), min_size=3, max_size=30),
       st.integers(-64, 64), st.sampled_from(["dice", "hd95_mm"]))
def test_noninferiority_shift_invariant(pairs, shift, metric):
    # dyadic values keep every sum exact, so the shift cannot create spurious ties
    model = [a / 64 for a, _ in pairs]
    inter = [b / 64 for _, b in pairs]
    margins = NonInferiorityMargin(0.25, 3.0, 3.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        o1 = noninferiority_test(model, inter, METRIC_META[metric], margins)
        o2 = noninferiority_test([v + shift / 64 for v in model], [v + shift / 64 for v in inter],
                                 METRIC_META[metric], margins)
    assert o1.significant == o2.significant and o1.p_raw == o2.p_raw


# --- Holm ------------------------------------------------------------------------

def test_holm_hand_fixtures():
    assert holm_adjust([0.03]) == [0.03]
    assert holm_adjust([0.01, 0.04]) == [0.02, 0.04]
    assert holm_adjust([0.02, 0.02, 0.02]) == [0.06, 0.06, 0.06]
    assert holm_adjust([0.04, 0.01]) == [0.04, 0.02]
    assert holm_adjust([0.5, 0.6]) == [1.0, 1.0]
    assert holm_adjust([]) == []


def test_holm_rejects_invalid():
    with pytest.raises(ValueError):
        holm_adjust([0.5, 1.2])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_holm_properties(p):
    adj = holm_adjust(p)
    order = np.argsort(p, kind="stable")
    srt = np.asarray(adj)[order]
    assert all(a <= b for a, b in zip(srt, srt[1:]))
    assert all(a >= r and a <= 1 for a, r in zip(adj, p))
    if len(p) == 1:
        assert adj == p


def test_holm_matches_statsmodels(rng):
    multipletests = pytest.importorskip("statsmodels.stats.multitest").multipletests
    for _ in range(200):
        p = rng.random(rng.integers(1, 30)) ** 3
        np.testing.assert_allclose(holm_adjust(p), multipletests(p, method="holm")[1], rtol=0, atol=1e-15)


def test_apply_holm_skips_undefined():
    vals = list(np.linspace(0.3, 0.9, 10))
    outs = [noninferiority_test(vals, vals, METRIC_META["dice"]) for _ in range(3)]
    with pytest.warns(RuntimeWarning):
        outs.append(noninferiority_test([0.25] * 4, [0.5] * 4, METRIC_META["dice"],
                                        NonInferiorityMargin(bounded_unit=0.25)))
    assert apply_holm(outs) == 3
    assert all(o.p_adjusted == pytest.approx(3 * 2.0 ** -10) for o in outs[:3])
    assert outs[3].p_adjusted is None and not outs[3].significant


# --- bootstrap -------------------------------------------------------------------

def test_bootstrap_trivial():
    s = bootstrap_median_ci([5, 5, 5, 5], 500, 1)
    assert (s.median, s.ci_lo, s.ci_hi, s.half_width) == (5, 5, 5, 0)
    s = bootstrap_median_ci([7], 500, 1)
    assert (s.median, s.ci_lo, s.ci_hi) == (7, 7, 7)
    with pytest.raises(ValueError):
        bootstrap_median_ci([], 10, 0)


def test_bootstrap_deterministic(rng):
    x = rng.normal(size=32)
    assert bootstrap_median_ci(x, 2000, 11) == bootstrap_median_ci(x, 2000, 11)
    assert bootstrap_median_ci(x, 2000, 11) != bootstrap_median_ci(x, 2000, 12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.integers(0, 2 ** 32))
def test_bootstrap_invariants(values, seed):
    s = bootstrap_median_ci(values, 200, seed)
    assert s.ci_lo <= s.median <= s.ci_hi
    assert s.half_width == max(s.median - s.ci_lo, s.ci_hi - s.median)
    assert s.median == np.median(values)


def test_bootstrap_percentiles_match_manual_loop():
    x = np.array([0.1, 0.4, 0.35, 0.8, 0.55, 0.62, 0.2, 0.9, 0.33])
    s = bootstrap_median_ci(x, 3000, 5)
    rng = np.random.default_rng(5)
    meds = np.median(x[rng.integers(0, x.size, size=(3000, x.size))], axis=1)
    lo, hi = np.percentile(meds, [2.5, 97.5])
    assert (s.ci_lo, s.ci_hi) == (min(lo, np.median(x)), max(hi, np.median(x)))


def test_format_summary_rendering():
    from segagree.stats import BootstrapSummary

    s = BootstrapSummary(0.63, 0.47, 0.79, max(0.63 - 0.47, 0.79 - 0.63), 10000, 0)
    assert format_summary(s) == "0.63 ± 0.16"
    assert format_summary(BootstrapSummary(0.66, 0.56, 0.7, 0.1, 1, 0)) == "0.66 ± 0.1"
    assert format_summary(BootstrapSummary(1.0, 1.0, 1.0, 0.0, 1, 0)) == "1.00 ± 0"


# --- Spearman --------------------------------------------------------------------

def test_spearman_examples():
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert spearman_rho(x, [v ** 3 for v in x]) == 1.0
    assert spearman_rho(x, [-v for v in x]) == -1.0
    assert spearman_rho([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)


def test_spearman_errors():
    with pytest.raises(DegenerateRankError):
        spearman_rho([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman_rho([1, 2], [1, 2])


def test_spearman_matches_scipy(rng):
    for _ in range(50):
        x = np.round(rng.normal(size=20), 1)
        y = np.round(x + rng.normal(size=20), 1)
        assert spearman_rho(x, y) == pytest.approx(scipy.stats.spearmanr(x, y)[0], abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=25),
       st.lists(st.integers(-1000, 1000), min_size=3, max_size=25))
def test_spearman_monotone_invariance(x, y):
    n = min(len(x), len(y))
    x, y = np.array(x[:n], dtype=float), np.array(y[:n], dtype=float)
    assume(np.ptp(x) > 0 and np.ptp(y) > 0)
    assert spearman_rho(np.exp(x / 100), y ** 3) == pytest.approx(spearman_rho(x, y), abs=1e-12)
