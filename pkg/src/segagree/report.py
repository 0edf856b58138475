"""Non-inferiority report in the layout of the published comparison table.

For every test expert ``X`` and metric, the report holds the bootstrapped
median of inter-expert agreement ``(X to training)`` and model-expert agreement
``(X to model)``, plus the Holm-adjusted non-inferiority p-value. A final
column summarises ``(training to model)``.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .cohort import AgreementTable, ManifestError, Pair, pair_id
from .metrics import METRIC_NAMES
from .stats import (
    DEFAULT_ALPHA,
    DEFAULT_RESAMPLES,
    METRIC_META,
    BootstrapSummary,
    NonInferiorityMargin,
    NonInferiorityOutcome,
    apply_holm,
    bootstrap_median_ci,
    format_summary,
    noninferiority_test,
)
from .synth import derive_seed

CATEGORIES = (
    ("Volume", ("vs", "avd_ml")),
    ("Overlap", ("dice", "precision", "recall")),
    ("Distance", ("hd95_mm", "sdt")),
)


def metric_label(metric: str, tol_mm: float) -> str:
    return {
        "vs": "VS",
        "avd_ml": "AVD [ml]",
        "dice": "Dice",
        "precision": "Precision",
        "recall": "Recall",
        "hd95_mm": "HD 95 [mm]",
        "sdt": f"SDT {tol_mm:g}mm",
    }[metric]


def format_p(p: Optional[float], alpha: float = DEFAULT_ALPHA) -> str:
    """Threshold rendering: ``p<0.0001`` ... ``p<alpha``, otherwise ``non-sig``."""
    if p is None:
        return "n/a"
    for cut in (0.0001, 0.001, 0.01):
        if p < cut and cut < alpha:
            return f"p<{cut:g}"
    return f"p<{alpha:g}" if p < alpha else "non-sig"


@dataclass
class ReportRow:
    test_expert: str
    category: str
    metric: str
    inter_pair: Pair
    model_pair: Pair
    inter: Optional[BootstrapSummary]
    model: Optional[BootstrapSummary]
    outcome: NonInferiorityOutcome


@dataclass
class Report:
    rows: List[ReportRow]
    training_cells: Dict[str, Optional[BootstrapSummary]]
    training_pair: Pair
    test_experts: List[str]
    family_size: int
    alpha: float
    margins: NonInferiorityMargin
    n_resamples: int
    seed: int
    tol_mm: float
    n_cases: int
    exclusions: List[Dict[str, str]] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def row(self, test_expert: str, metric: str) -> ReportRow:
        for r in self.rows:
            if r.test_expert == test_expert and r.metric == metric:
                return r
        raise KeyError((test_expert, metric))

    def to_markdown(self) -> str:
        cell = lambda s: "n/a" if s is None else format_summary(s)  # noqa: E731
        lines = ["# Model-expert vs inter-expert agreement", ""]
        header = ["Category", "Metric¹"]
        for x in self.test_experts:
            r0 = self.row(x, METRIC_NAMES[0])
            header += [f"Expert {x} Inter-Expert² ({pair_id(r0.inter_pair)})",
                       f"Expert {x} Model-Expert² ({pair_id(r0.model_pair)})",
                       f"Expert {x} p-value³ for non-inferiority"]
        header.append(f"Expert {self.training_pair[0]} Model-Expert² ({pair_id(self.training_pair)})")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for category, metrics in CATEGORIES:
            for j, metric in enumerate(metrics):
                cells = [category if j == 0 else "", metric_label(metric, self.tol_mm)]
                for x in self.test_experts:
                    r = self.row(x, metric)
                    cells += [cell(r.inter), cell(r.model), format_p(r.outcome.p_adjusted, self.alpha)]
                cells.append(cell(self.training_cells.get(metric)))
                lines.append("| " + " | ".join(cells) + " |")
        lines += [
            "",
            "¹ VS = Volumetric Similarity, AVD = Absolute Volume Difference, "
            "HD 95 = Hausdorff Distance 95th percentile, "
            f"SDT = Surface Dice at Tolerance {self.tol_mm:g}mm",
            f"² Median ± 95% CI (bootstrapped, {self.n_resamples} resamples, seed {self.seed}); "
            "± is the larger distance from the median to a CI bound",
            "³ p-values of one-sided Wilcoxon signed-rank test, Holm-Bonferroni adjusted over "
            f"{self.family_size} tests; significant if p < {self.alpha:g}. Margins: "
            f"{self.margins.bounded_unit:g} (unit-range metrics), {self.margins.avd_ml:g} ml (AVD), "
            f"{self.margins.hd95_mm:g} mm (HD 95)",
            "",
            "## Tests",
            "",
            "| Expert | Metric | n pairs | n dropped | margin | p raw | p adjusted | non-inferior |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for r in self.rows:
            o = r.outcome
            lines.append(
                f"| {r.test_expert} | {metric_label(r.metric, self.tol_mm)} | {o.n_pairs} | {o.n_dropped} | "
                f"{o.margin_used:g} | {_fmt_p(o.p_raw)} | {_fmt_p(o.p_adjusted)} | {'yes' if o.significant else 'no'} |"
            )
        lines += ["", f"Cases evaluated: {self.n_cases}", "", "## Exclusions", ""]
        if self.exclusions:
            lines += [f"- {e['case_id']}: {e['reason']}" for e in self.exclusions]
        else:
            lines.append("None.")
        if self.notes:
            lines += ["", "## Notes", ""] + [f"- {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["test_expert", "category", "metric", "inter_pair", "inter_median", "inter_ci_lo", "inter_ci_hi",
                    "inter_half_width", "model_pair", "model_median", "model_ci_lo", "model_ci_hi",
                    "model_half_width", "n_pairs", "n_dropped", "margin_used", "p_raw", "p_adjusted",
                    "significant", "family_size"])
        for r in self.rows:
            o = r.outcome
            w.writerow([r.test_expert, r.category, r.metric, pair_id(r.inter_pair), *_summary_fields(r.inter),
                        pair_id(r.model_pair), *_summary_fields(r.model), o.n_pairs, o.n_dropped,
                        repr(o.margin_used), _fmt_p(o.p_raw), _fmt_p(o.p_adjusted), int(o.significant),
                        self.family_size])
        return buf.getvalue()

    def outcomes_json(self) -> str:
        rows = [{"test_expert": r.test_expert, **r.outcome.to_dict()} for r in self.rows]
        return json.dumps({"family_size": self.family_size, "alpha": self.alpha, "outcomes": rows}, indent=2) + "\n"


def _summary_fields(s: Optional[BootstrapSummary]):
    if s is None:
        return ["", "", "", ""]
    return [repr(s.median), repr(s.ci_lo), repr(s.ci_hi), repr(s.half_width)]


def _fmt_p(p: Optional[float]) -> str:
    return "" if p is None else repr(p)


def _summarise(values, n_resamples: int, seed: int) -> Optional[BootstrapSummary]:
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    return bootstrap_median_ci(defined, n_resamples, seed)


def noninferiority_report(table: AgreementTable, margins: NonInferiorityMargin = NonInferiorityMargin(),
                          alpha: float = DEFAULT_ALPHA, n_resamples: int = DEFAULT_RESAMPLES,
                          seed: int = 0) -> Report:
    """Bootstrap summaries and Holm-adjusted non-inferiority tests for every test expert and metric.

    The Holm family is every test in this report with a defined p-value.
    """
    training, model = table.training_rater, table.model
    needed = [(x, training) for x in table.test_raters] + [(x, model) for x in table.test_raters]
    missing = [pair_id(p) for p in needed if p not in table.pairs]
    if missing:
        raise ManifestError(f"agreement table lacks pair(s): {', '.join(missing)}")

    rows: List[ReportRow] = []
    notes: List[str] = []
    for x in table.test_raters:
        inter_pair, model_pair = (x, training), (x, model)
        for category, metrics in CATEGORIES:
            for metric in metrics:
                inter_vals = table.column(inter_pair, metric)
                model_vals = table.column(model_pair, metric)
                meta = METRIC_META[metric]
                try:
                    with warnings.catch_warnings(record=True) as caught:
                        warnings.simplefilter("always")
                        outcome = noninferiority_test(model_vals, inter_vals, meta, margins, alpha)
                    notes += [f"Expert {x}, {metric}: {w.message}" for w in caught]
                except ValueError as exc:
                    notes.append(f"Expert {x}, {metric}: test not run ({exc})")
                    outcome = NonInferiorityOutcome(metric, 0, len(inter_vals), None, None, False,
                                                    margins.for_metric(meta))
                rows.append(ReportRow(
                    x, category, metric, inter_pair, model_pair,
                    _summarise(inter_vals, n_resamples, derive_seed(seed, pair_id(inter_pair), metric)),
                    _summarise(model_vals, n_resamples, derive_seed(seed, pair_id(model_pair), metric)),
                    outcome,
                ))
    family = apply_holm([r.outcome for r in rows], alpha)

    training_pair = (training, model)
    training_cells: Dict[str, Optional[BootstrapSummary]] = {}
    if training_pair in table.pairs:
        for metric in METRIC_NAMES:
            training_cells[metric] = _summarise(table.column(training_pair, metric), n_resamples,
                                                derive_seed(seed, pair_id(training_pair), metric))
    return Report(rows, training_cells, training_pair, list(table.test_raters), family, alpha, margins,
                  n_resamples, seed, table.tol_mm, len(table.case_ids), list(table.exclusions), notes)
