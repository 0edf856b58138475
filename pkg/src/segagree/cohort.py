"""Cohort handling: manifests, partitions, batch agreement and volume scatter export.

Rater pairs are ordered ``(pred, ref)``: the first rater is evaluated as the
prediction against the second as reference, so ``("B", "A")`` reads
"B to A".
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .io import VolumeIOError, load_mask
from .metrics import DEFAULT_TOLERANCE_MM, METRIC_NAMES, OK, GridMismatchError, MetricRecord, evaluate_pair
from .stats import DegenerateRankError, spearman_rho
from .volgrid import volume_ml

log = logging.getLogger(__name__)

Pair = Tuple[str, str]

DEFAULT_TRAINING_RATER = "A"
DEFAULT_TEST_RATERS = ("B", "C")
DEFAULT_MODEL = "Model"


class ManifestError(ValueError):
    pass


def pair_id(pair: Pair) -> str:
    return f"{pair[0]} to {pair[1]}"


@dataclass
class CaseEntry:
    case_id: str
    mask_paths: Dict[str, str]
    image_path: Optional[str] = None


@dataclass
class Manifest:
    cases: List[CaseEntry]
    raters: List[str]
    training_rater: str = DEFAULT_TRAINING_RATER
    test_raters: List[str] = field(default_factory=lambda: list(DEFAULT_TEST_RATERS))
    model: str = DEFAULT_MODEL
    base_dir: Path = Path(".")

    def __post_init__(self):
        self.base_dir = Path(self.base_dir)
        self.test_raters = list(self.test_raters)
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate case ids: {', '.join(dupes)}")
        if self.training_rater in self.test_raters:
            raise ManifestError("training rater must differ from the test raters")
        for role in [self.training_rater, self.model, *self.test_raters]:
            if role not in self.raters:
                raise ManifestError(f"rater {role!r} has no masks in the manifest")
        for r in self.raters:
            if ":" in r:
                raise ManifestError(f"rater id {r!r} may not contain ':'")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        return {
            "raters": list(self.raters),
            "roles": {"training_rater": self.training_rater, "test_raters": list(self.test_raters),
                      "model": self.model},
            "cases": [
                {"case_id": c.case_id, "mask_paths": dict(c.mask_paths),
                 **({"image_path": c.image_path} if c.image_path else {})}
                for c in self.cases
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path, training_rater: Optional[str] = None, test_raters: Optional[Sequence[str]] = None,
             model: Optional[str] = None) -> "Manifest":
        """Read a JSON or CSV manifest; explicit role arguments override the file."""
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ManifestError(f"{path}: cannot read manifest ({exc})") from exc
        if path.suffix.lower() == ".csv":
            cases, raters, roles = _parse_csv_manifest(text, path)
        else:
            try:
                d = json.loads(text)
                raters = list(d["raters"]) if "raters" in d else None
                roles = d.get("roles", {})
                cases = [CaseEntry(str(c["case_id"]), {str(k): str(v) for k, v in c["mask_paths"].items()},
                                   c.get("image_path")) for c in d["cases"]]
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise ManifestError(f"{path}: malformed manifest ({exc})") from exc
            if raters is None:
                raters = _raters_in_order(cases)
        return cls(
            cases,
            raters,
            training_rater or roles.get("training_rater", DEFAULT_TRAINING_RATER),
            list(test_raters or roles.get("test_raters", DEFAULT_TEST_RATERS)),
            model or roles.get("model", DEFAULT_MODEL),
            base_dir=path.parent,
        )


def _raters_in_order(cases) -> List[str]:
    seen: List[str] = []
    for c in cases:
        for r in c.mask_paths:
            if r not in seen:
                seen.append(r)
    return seen


def _parse_csv_manifest(text: str, path: Path):
    reader = csv.DictReader(io.StringIO(text))
    required = {"case_id", "rater_id", "mask_path"}
    if reader.fieldnames is None or not required <= set(reader.fieldnames):
        raise ManifestError(f"{path}: CSV manifest needs columns case_id, rater_id, mask_path")
    by_case: Dict[str, CaseEntry] = {}
    for row in reader:
        cid = row["case_id"].strip()
        entry = by_case.setdefault(cid, CaseEntry(cid, {}))
        rater = row["rater_id"].strip()
        if rater in entry.mask_paths:
            raise ManifestError(f"{path}: case {cid} lists rater {rater} twice")
        entry.mask_paths[rater] = row["mask_path"].strip()
        image = (row.get("image_path") or "").strip()
        if image:
            entry.image_path = image
    cases = list(by_case.values())
    return cases, _raters_in_order(cases), {}


@dataclass
class SplitPlan:
    seed: int
    test_ids: List[str]
    train_ids: List[str]
    folds: List[List[str]]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "test": self.test_ids, "train": self.train_ids, "folds": self.folds}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def split_cohort(ids: Sequence, n_test: int, k_folds: int, seed: int) -> SplitPlan:
    """Seeded shuffle; the first ``n_test`` ids form the test set and the rest
    is cut into ``k_folds`` folds whose sizes differ by at most one."""
    ids = [str(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    if not 0 <= n_test < len(ids):
        raise ValueError(f"n_test must be in [0, {len(ids)}), got {n_test}")
    n_train = len(ids) - n_test
    if not 1 <= k_folds <= n_train:
        raise ValueError(f"k_folds must be in [1, {n_train}], got {k_folds}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    test, train = shuffled[:n_test], shuffled[n_test:]
    folds = [list(chunk) for chunk in np.array_split(np.array(train, dtype=object), k_folds)]
    return SplitPlan(seed, test, train, folds)


def default_pairs(training_rater: str, test_raters: Sequence[str], model: str) -> List[Pair]:
    pairs: List[Pair] = []
    for x in test_raters:
        pairs += [(x, training_rater), (x, model)]
    pairs.append((training_rater, model))
    return pairs


@dataclass
class AgreementTable:
    """Per-case metric records for each rater pair, plus per-rater volumes."""

    case_ids: List[str]
    pairs: List[Pair]
    records: Dict[str, Dict[Pair, MetricRecord]]
    volumes: Dict[str, Dict[str, float]]
    raters: List[str]
    training_rater: str
    test_raters: List[str]
    model: str
    tol_mm: float = DEFAULT_TOLERANCE_MM
    exclusions: List[Dict[str, str]] = field(default_factory=list)

    def column(self, pair: Pair, metric: str) -> List[Optional[float]]:
        return [self.records[c][pair].get(metric) for c in self.case_ids]

    def volume_column(self, rater: str) -> List[float]:
        return [self.volumes[c][rater] for c in self.case_ids]

    def columns(self) -> List[str]:
        cols = ["case_id"]
        for pred, ref in self.pairs:
            cols += [f"{pred}:{ref}:{m}" for m in METRIC_NAMES] + [f"{pred}:{ref}:state"]
        cols += [f"volume_ml:{r}" for r in self.raters]
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for cid in self.case_ids:
            row = [cid]
            for pair in self.pairs:
                rec = self.records[cid][pair]
                row += [_fmt(rec.get(m)) for m in METRIC_NAMES]
                row.append(_pair_state(rec))
            row += [_fmt(self.volumes[cid][r]) for r in self.raters]
            w.writerow(row)
        return buf.getvalue()

    def meta(self) -> dict:
        return {
            "raters": self.raters,
            "roles": {"training_rater": self.training_rater, "test_raters": self.test_raters, "model": self.model},
            "pairs": [list(p) for p in self.pairs],
            "tol_mm": self.tol_mm,
            "n_cases": len(self.case_ids),
            "exclusions": self.exclusions,
        }

    def save(self, csv_path) -> Tuple[Path, Path]:
        """Write ``<name>.csv`` and its ``<name>.meta.json`` sidecar."""
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(self.to_csv())
        meta_path = meta_path_for(csv_path)
        meta_path.write_text(json.dumps(self.meta(), indent=2) + "\n")
        return csv_path, meta_path

    @classmethod
    def load(cls, csv_path) -> "AgreementTable":
        csv_path = Path(csv_path)
        meta_path = meta_path_for(csv_path)
        try:
            meta = json.loads(meta_path.read_text())
            rows = list(csv.DictReader(io.StringIO(csv_path.read_text())))
        except (OSError, ValueError) as exc:
            raise ManifestError(f"cannot read agreement table {csv_path}: {exc}") from exc
        pairs = [tuple(p) for p in meta["pairs"]]
        roles = meta["roles"]
        records: Dict[str, Dict[Pair, MetricRecord]] = {}
        volumes: Dict[str, Dict[str, float]] = {}
        case_ids = []
        try:
            for row in rows:
                cid = row["case_id"]
                case_ids.append(cid)
                records[cid] = {}
                for pred, ref in pairs:
                    state = row[f"{pred}:{ref}:state"]
                    values = {m: _parse(row[f"{pred}:{ref}:{m}"]) for m in METRIC_NAMES}
                    flags = dict.fromkeys(METRIC_NAMES, state)
                    records[cid][(pred, ref)] = MetricRecord(**values, flags=flags)
                volumes[cid] = {r: float(row[f"volume_ml:{r}"]) for r in meta["raters"]}
        except KeyError as exc:
            raise ManifestError(f"{csv_path}: missing column {exc}") from exc
        return cls(case_ids, pairs, records, volumes, list(meta["raters"]), roles["training_rater"],
                   list(roles["test_raters"]), roles["model"], float(meta["tol_mm"]), list(meta["exclusions"]))


def meta_path_for(csv_path: Path) -> Path:
    return csv_path.with_name(csv_path.stem + ".meta.json")


def _pair_state(rec: MetricRecord) -> str:
    states = set(rec.flags.values()) - {OK}
    return states.pop() if states else OK


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def _parse(s: str) -> Optional[float]:
    return None if s == "" else float(s)


def _evaluate_case(case_id: str, paths: Mapping[str, str], pairs: Sequence[Pair], tol_mm: float):
    masks = {r: load_mask(p) for r, p in paths.items()}
    first = next(iter(masks.values()))
    for r, m in masks.items():
        if not m.same_geometry(first):
            raise GridMismatchError(f"mask of rater {r} has dims {m.dims} / spacing {m.spacing_mm}, "
                                    f"expected {first.dims} / {first.spacing_mm}")
    records = {pair: evaluate_pair(masks[pair[0]], masks[pair[1]], tol_mm) for pair in pairs}
    volumes = {r: volume_ml(m) for r, m in masks.items()}
    return case_id, records, volumes


def _evaluate_case_safe(args):
    case_id, paths, pairs, tol_mm = args
    try:
        return _evaluate_case(case_id, paths, pairs, tol_mm), None
    except (VolumeIOError, GridMismatchError, OSError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def run_agreement_study(manifest: Manifest, tol_mm: float = DEFAULT_TOLERANCE_MM,
                        pairs: Optional[Sequence[Pair]] = None, jobs: int = 1) -> AgreementTable:
    """Evaluate every configured rater pair on every case.

    Cases that fail to load (missing rater, unreadable file, mismatched grids)
    are excluded and listed in ``exclusions``; row order follows the manifest
    regardless of ``jobs``.
    """
    pairs = list(pairs or default_pairs(manifest.training_rater, manifest.test_raters, manifest.model))
    needed = sorted({r for p in pairs for r in p}, key=manifest.raters.index)
    tasks = []
    exclusions: List[Dict[str, str]] = []
    for case in manifest.cases:
        missing = [r for r in needed if r not in case.mask_paths]
        if missing:
            exclusions.append({"case_id": case.case_id, "reason": f"no mask for rater(s) {', '.join(missing)}"})
            continue
        paths = {r: str(manifest.resolve(case.mask_paths[r])) for r in needed}
        tasks.append((case.case_id, paths, pairs, tol_mm))

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_case_safe, tasks))
    else:
        results = [_evaluate_case_safe(t) for t in tasks]

    case_ids, records, volumes = [], {}, {}
    for task, (result, error) in zip(tasks, results):
        if error is not None:
            log.warning("excluding case %s: %s", task[0], error)
            exclusions.append({"case_id": task[0], "reason": error})
            continue
        cid, recs, vols = result
        case_ids.append(cid)
        records[cid] = recs
        volumes[cid] = vols
    order = {c.case_id: i for i, c in enumerate(manifest.cases)}
    exclusions.sort(key=lambda e: order[e["case_id"]])
    return AgreementTable(case_ids, pairs, records, volumes, needed, manifest.training_rater,
                          list(manifest.test_raters), manifest.model, tol_mm, exclusions)


@dataclass
class VolumeScatter:
    """Per-case volume pairs and Spearman rho for each rater pair."""

    rows: List[Tuple[str, str, float, float]]
    rho: Dict[str, Optional[float]]
    flags: Dict[str, str]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair", "case_id", "rater_a_ml", "rater_b_ml"])
        for pid, cid, a, b in self.rows:
            w.writerow([pid, cid, repr(a), repr(b)])
        return buf.getvalue()

    def rho_json(self) -> str:
        return json.dumps({"rho": self.rho, "flags": self.flags}, indent=2) + "\n"


def export_volume_scatter(volumes: Mapping[str, Mapping[str, float]], pairs: Sequence[Pair],
                          case_ids: Optional[Sequence[str]] = None) -> VolumeScatter:
    """Scatter data and Spearman rho of rater volumes (ml) per pair.

    A pair whose volume vector has no rank variance gets ``rho=None`` and the
    flag ``"degenerate"``.
    """
    case_ids = list(case_ids if case_ids is not None else volumes)
    if len(case_ids) < 3:
        raise ValueError("volume scatter needs at least 3 cases")
    rows, rho, flags = [], {}, {}
    for pair in pairs:
        pid = pair_id(pair)
        a = [float(volumes[c][pair[0]]) for c in case_ids]
        b = [float(volumes[c][pair[1]]) for c in case_ids]
        rows += [(pid, c, x, y) for c, x, y in zip(case_ids, a, b)]
        try:
            rho[pid] = spearman_rho(a, b)
            flags[pid] = OK
        except DegenerateRankError:
            rho[pid] = None
            flags[pid] = "degenerate"
    return VolumeScatter(rows, rho, flags)


def scatter_pairs(table: AgreementTable) -> List[Pair]:
    pairs: List[Pair] = []
    for x in table.test_raters:
        pairs += [(x, table.training_rater), (x, table.model)]
    return pairs
