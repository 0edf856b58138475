"""Command-line entry point: ``segagree <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import OUT_DIR_ENV, SPLIT_K_FOLDS, SPLIT_N_TEST, RunConfig, default_out_dir
from .metrics import DEFAULT_TOLERANCE_MM
from .stats import DEFAULT_ALPHA, DEFAULT_RESAMPLES, NonInferiorityMargin

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_UNKNOWN_COMMAND = 3
EXIT_FILE = 4
EXIT_DATA = 5

COMMANDS = ("evaluate", "cohort", "report", "mirror", "split", "synth")

log = logging.getLogger("segagree")

_DEFAULT_MARGINS = NonInferiorityMargin()


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _csv_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> List[int]:
    return [int(t) for t in _csv_list(text)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segagree",
        description="Segmentation agreement metrics and model-vs-expert non-inferiority testing.",
        formatter_class=_Formatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    tol = argparse.ArgumentParser(add_help=False)
    tol.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE_MM,
                     help="surface Dice tolerance in mm (study value: 5)")

    jobs = argparse.ArgumentParser(add_help=False)
    jobs.add_argument("--jobs", type=int, default=1, help="parallel case evaluations; output does not depend on it")

    roles = argparse.ArgumentParser(add_help=False)
    roles.add_argument("--training", default=None, help="training rater id (manifest role, else 'A')")
    roles.add_argument("--test", type=_csv_list, default=None, help="comma-separated test rater ids (else 'B,C')")
    roles.add_argument("--model", default=None, help="model rater id (else 'Model')")

    def out_arg(p, what):
        p.add_argument("--out", type=Path, default=None,
                       help=f"{what} (default: ${OUT_DIR_ENV} or ./segagree-out)")

    p = sub.add_parser("evaluate", parents=[tol], formatter_class=_Formatter,
                       help="metrics for one prediction/reference mask pair",
                       description="Evaluate PRED against REF and print the metric record as JSON.")
    p.add_argument("pred", type=Path, help="prediction mask (.nii, .nii.gz or raw .json sidecar)")
    p.add_argument("ref", type=Path, help="reference mask")
    p.add_argument("--out", type=Path, default=None, help="write the JSON record here instead of stdout")

    p = sub.add_parser("cohort", parents=[tol, jobs, roles], formatter_class=_Formatter,
                       help="agreement table for every case and rater pair of a manifest")
    p.add_argument("manifest", type=Path, help="manifest (.json, or .csv with case_id,rater_id,mask_path)")
    out_arg(p, "output directory for agreement.csv and agreement.meta.json")

    p = sub.add_parser("report", formatter_class=_Formatter,
                       help="non-inferiority report from an agreement table")
    p.add_argument("table", type=Path, help="agreement.csv written by 'cohort' (its .meta.json must sit beside it)")
    p.add_argument("--margin-unit", type=float, default=_DEFAULT_MARGINS.bounded_unit,
                   help="margin for unit-range metrics (study value: 0.2)")
    p.add_argument("--margin-avd", type=float, default=_DEFAULT_MARGINS.avd_ml,
                   help="AVD margin in ml (study value: 3)")
    p.add_argument("--margin-hd", type=float, default=_DEFAULT_MARGINS.hd95_mm,
                   help="HD95 margin in mm (study value: 3)")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="significance level (study value: 0.05)")
    p.add_argument("--resamples", type=int, default=DEFAULT_RESAMPLES, help="bootstrap resamples")
    p.add_argument("--seed", type=int, required=True, help="bootstrap seed (required)")
    out_arg(p, "output directory for report.md, report.csv, noninferiority.json and volume scatter")

    p = sub.add_parser("mirror", formatter_class=_Formatter,
                       help="mirrored, rigidly co-registered symmetry channel for an image")
    p.add_argument("image", type=Path, help="input image volume")
    p.add_argument("--mode", choices=("registered", "hemisphere"), default="registered",
                   help="full co-registered mirror, or replace one hemisphere with it")
    p.add_argument("--side", choices=("left", "right"), default=None,
                   help="hemisphere to replace (hemisphere mode only)")
    p.add_argument("--levels", type=_int_list, default=[4, 2, 1], help="pyramid factors, descending to 1")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: next to the input)")

    p = sub.add_parser("split", formatter_class=_Formatter, help="seeded test/train split with k folds")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--n", type=int, help="number of cases; ids are case_000, case_001, ... (study: 232)")
    src.add_argument("--ids", type=Path, help="file with one case id per line, or a JSON list")
    p.add_argument("--test", type=int, default=SPLIT_N_TEST, help="test set size (study value: 32)")
    p.add_argument("--folds", type=int, default=SPLIT_K_FOLDS, help="cross-validation folds (study value: 5)")
    p.add_argument("--seed", type=int, required=True, help="shuffle seed (required)")
    p.add_argument("--out", type=Path, default=None, help="write the plan JSON here instead of stdout")

    p = sub.add_parser("synth", formatter_class=_Formatter, help="synthetic multi-rater cohort")
    p.add_argument("--cases", type=int, default=SPLIT_N_TEST, help="number of cases (study test set: 32)")
    p.add_argument("--seed", type=int, required=True, help="master seed (required)")
    p.add_argument("--config", type=Path, default=None,
                   help="JSON with optional 'lesion' (LesionSpec fields) and 'raters' (id -> RaterSpec fields)")
    p.add_argument("--format", choices=("nii", "nii.gz", "raw"), default="nii", help="mask file format")
    out_arg(p, "output directory for masks and manifest.json")
    return parser


def _out_dir(arg: Optional[Path]) -> Path:
    return arg if arg is not None else default_out_dir()


def _write(text: str, path: Optional[Path]) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def cmd_evaluate(args) -> int:
    from .io import load_mask
    from .metrics import evaluate_pair

    record = evaluate_pair(load_mask(args.pred), load_mask(args.ref), args.tol)
    _write(json.dumps(record.to_dict(), indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_cohort(args) -> int:
    from .cohort import Manifest, run_agreement_study

    manifest = Manifest.load(args.manifest, args.training, args.test, args.model)
    table = run_agreement_study(manifest, args.tol, jobs=args.jobs)
    out = _out_dir(args.out)
    csv_path, _ = table.save(out / "agreement.csv")
    for e in table.exclusions:
        print(f"excluded {e['case_id']}: {e['reason']}", file=sys.stderr)
    print(csv_path)
    return EXIT_OK


def cmd_report(args) -> int:
    from .cohort import AgreementTable, export_volume_scatter, scatter_pairs
    from .report import noninferiority_report

    cfg = RunConfig(seed=args.seed, margins=NonInferiorityMargin(args.margin_unit, args.margin_avd, args.margin_hd),
                    alpha=args.alpha, n_resamples=args.resamples, out_dir=_out_dir(args.out))
    table = AgreementTable.load(args.table)
    report = noninferiority_report(table, cfg.margins, cfg.alpha, cfg.n_resamples, cfg.seed)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(report.to_markdown())
    (out / "report.csv").write_text(report.to_csv())
    (out / "noninferiority.json").write_text(report.outcomes_json())
    if len(table.case_ids) >= 3:
        scatter = export_volume_scatter(table.volumes, scatter_pairs(table), table.case_ids)
        (out / "volume_scatter.csv").write_text(scatter.to_csv())
        (out / "volume_rho.json").write_text(scatter.rho_json())
    print(out / "report.md")
    return EXIT_OK


def _mirror_name(image: Path) -> str:
    name = image.name
    for suffix in (".nii.gz", ".nii", ".json", ".raw"):
        if name.lower().endswith(suffix):
            return name[: -len(suffix)] + "_mirror" + (suffix if suffix != ".raw" else ".json")
    return name + "_mirror.nii.gz"


def cmd_mirror(args) -> int:
    from .io import load_volume, save_volume
    from .mirror import RegistrationOptions, build_mirror_channel

    if args.mode == "hemisphere" and args.side is None:
        raise ValueError("--mode hemisphere needs --side")
    image = load_volume(args.image)
    result = build_mirror_channel(image, RegistrationOptions(pyramid=tuple(args.levels)), args.mode, args.side)
    out_dir = args.out if args.out is not None else args.image.parent
    target = save_volume(result.mirror, out_dir / _mirror_name(args.image))
    stem = target.name.split(".")[0]
    (out_dir / f"{stem}_transform.json").write_text(result.transform.to_json())
    print(target)
    return EXIT_OK


def cmd_split(args) -> int:
    from .cohort import split_cohort

    if args.n is not None:
        ids = [f"case_{i:03d}" for i in range(args.n)]
    else:
        text = args.ids.read_text()
        ids = json.loads(text) if text.lstrip().startswith("[") else [ln.strip() for ln in text.splitlines()
                                                                       if ln.strip()]
    plan = split_cohort(ids, args.test, args.folds, args.seed)
    _write(plan.to_json(), args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import DEFAULT_RATERS, LesionSpec, RaterSpec, generate_cohort

    lesion, raters = LesionSpec(), dict(DEFAULT_RATERS)
    roles = {}
    if args.config is not None:
        cfg = json.loads(args.config.read_text())
        if "lesion" in cfg:
            lesion = LesionSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["lesion"].items()})
        if "raters" in cfg:
            raters = {k: RaterSpec(**v) for k, v in cfg["raters"].items()}
        roles = cfg.get("roles", {})
    manifest_kwargs = {k: roles[k] for k in ("training_rater", "test_raters", "model") if k in roles}
    out = _out_dir(args.out)
    generate_cohort(args.cases, lesion, raters, args.seed, out, fmt=args.format, **manifest_kwargs)
    print(out / "manifest.json")
    return EXIT_OK


HANDLERS = {
    "evaluate": cmd_evaluate,
    "cohort": cmd_cohort,
    "report": cmd_report,
    "mirror": cmd_mirror,
    "split": cmd_split,
    "synth": cmd_synth,
}


def main(argv: Optional[List[str]] = None) -> int:
    from .cohort import ManifestError
    from .io import VolumeIOError

    argv = list(sys.argv[1:] if argv is None else argv)
    positional = [a for a in argv if not a.startswith("-")]
    if positional and positional[0] not in COMMANDS:
        print(f"segagree: unknown subcommand {positional[0]!r} (choose from {', '.join(COMMANDS)})",
              file=sys.stderr)
        return EXIT_UNKNOWN_COMMAND
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except (VolumeIOError, ManifestError, OSError) as exc:
        print(f"segagree {args.command}: {exc}", file=sys.stderr)
        return EXIT_FILE
    except ValueError as exc:
        print(f"segagree {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
