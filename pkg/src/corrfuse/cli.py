"""Command-line entry point: ``corrfuse <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or invalid config,
3 macro PR-AUC below the ``--min-macro`` floor.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .cohort import CohortSpec, generate_cohort, label_names
from .config import ConfigError, TrainConfig
from .disease_corr import DiseaseCorrelation
from .evaluation import format_report_csv, macro_prauc, per_disease_report, read_report_scores
from .model import (ABLATIONS, VARIANTS, TrainingDiverged, cxr_dropout, label_matrix,
                    load_model, predict, save_model, split_dataset, strip_cxrs, train)
from .records import CohortFormatError, load_cohort, save_cohort

logger = logging.getLogger("corrfuse")

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_BELOW_FLOOR = 3
CKPT_NAME = "model.ckpt"


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=default, help="override the seed in spec/config")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="only print errors")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrfuse", parents=[_global_flags(False)],
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_global_flags(True)]

    p = sub.add_parser("gen-data", parents=common, help="generate a synthetic cohort")
    p.add_argument("--spec", type=Path, help="cohort spec JSON (defaults if omitted)")
    p.add_argument("--out", type=Path, required=True)

    for name, helptext in (("train", "train a model"), ("ablate", "train and test an ablated variant")):
        p = sub.add_parser(name, parents=common, help=helptext)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--config", type=Path, help="train config JSON (defaults if omitted)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name == "train":
            p.add_argument("--variant", choices=VARIANTS, default="full")
        else:
            p.add_argument("--variant", choices=ABLATIONS + ("ehr-only",), required=True)
            p.add_argument("--report", type=Path, help="per-disease test report CSV")

    p = sub.add_parser("eval", parents=common, help="score a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file or train output directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--baseline", type=Path, help="report CSV of a baseline run")
    p.add_argument("--min-macro", type=float, help="exit 3 when macro PR-AUC falls below this")
    p.add_argument("--alpha-dump", type=Path, help="write per-patient fusion attention CSV")
    p.add_argument("--strip-cxr", action="store_true", help="remove every CXR before scoring")
    p.add_argument("--cxr-dropout", type=float, default=0.0,
                   help="drop all CXRs of this fraction of CXR-bearing patients per batch")

    p = sub.add_parser("dump-corr", parents=common, help="write correlation matrices as CSV")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--tau", type=float, default=0.4)
    p.add_argument("--out", type=Path, required=True, help="CSV for A; A_bin/A_hat go alongside")
    p.add_argument("--train-split", action="store_true",
                   help="use only the seeded 70%% training split")
    return parser


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _write_matrix(path: Path, m: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(m):
            w.writerow([repr(float(x)) for x in row])


def _train_config(args) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "seed": args.seed})
    return config


def _write_training(out: Path, result) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_model(result, out / CKPT_NAME)
    (out / "config.json").write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_macro_prauc"])
        for rec in result.history:
            w.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_macro_prauc)])


def cmd_gen_data(args) -> int:
    spec = CohortSpec.from_file(args.spec) if args.spec else CohortSpec()
    if args.seed is not None:
        spec = CohortSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    records = generate_cohort(spec)
    save_cohort(records, args.out)
    _say(args, f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    records = load_cohort(args.data, config.window_length)
    result = train(records, config, variant=args.variant)
    _write_training(args.out, result)
    best = result.history[result.best_epoch - 1]
    _say(args, f"best epoch {result.best_epoch}: val macro-PRAUC {best.val_macro_prauc:.4f}")
    return 0


def cmd_ablate(args) -> int:
    config = _train_config(args)
    records = load_cohort(args.data, config.window_length)
    result = train(records, config, variant=args.variant)
    _write_training(args.out, result)
    test = result.splits.test
    probs = predict(test, result.params, result.correlation, config, args.variant)
    labels = label_matrix(test)
    report = macro_prauc(probs, labels)
    if args.report:
        rows = per_disease_report(probs, labels, label_names(labels.shape[1]))
        args.report.write_text(format_report_csv(rows))
    _say(args, f"{args.variant}: test macro-PRAUC {report.macro:.4f}")
    return 0


def _select_split(records, split: str, seed: int):
    if split == "all":
        return records
    return getattr(split_dataset(records, seed), split)


def cmd_eval(args) -> int:
    ckpt = args.ckpt / CKPT_NAME if args.ckpt.is_dir() else args.ckpt
    result = load_model(ckpt)
    config = result.config
    records = _select_split(load_cohort(args.data, config.window_length), args.split, config.seed)
    if not records:
        raise CohortFormatError(f"split {args.split!r} of {args.data} is empty")
    if args.strip_cxr:
        records = strip_cxrs(records)
    if args.cxr_dropout:
        rng = np.random.default_rng(config.seed if args.seed is None else args.seed)
        bs = config.effective_eval_batch
        records = [r for s in range(0, len(records), bs)
                   for r in cxr_dropout(records[s:s + bs], args.cxr_dropout, rng)]
    probs, alpha = predict(records, result.params, result.correlation, config, result.variant,
                           return_alpha=True)
    labels = label_matrix(records)
    names = label_names(labels.shape[1])
    baseline = read_report_scores(args.baseline) if args.baseline else None
    rows = per_disease_report(probs, labels, names, baseline)
    args.report.write_text(format_report_csv(rows))
    if args.alpha_dump:
        _write_alpha(args.alpha_dump, records, names, alpha)
    macro = macro_prauc(probs, labels).macro
    _say(args, f"macro-PRAUC {macro:.4f} on {len(records)} patients ({args.split})")
    if args.min_macro is not None and not macro >= args.min_macro:
        print(f"macro-PRAUC {macro:.4f} below floor {args.min_macro}", file=sys.stderr)
        return EXIT_BELOW_FLOOR
    return 0


def _write_alpha(path: Path, records, names, alpha: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "n_cxr", "disease", "alpha_ehr", "alpha_ehr_ehr", "alpha_ehr_cxr"])
        for rec, a in zip(records, alpha):
            for name, row in zip(names, a):
                w.writerow([rec.patient_id, rec.n_cxr, name, *(repr(float(x)) for x in row)])


def cmd_dump_corr(args) -> int:
    records = load_cohort(args.data)
    if args.train_split:
        records = split_dataset(records, args.seed or 0).train
    corr = DiseaseCorrelation.from_labels(label_matrix(records), args.tau)
    out = args.out
    _write_matrix(out, corr.A)
    _write_matrix(out.with_name(out.stem + "_bin" + out.suffix), corr.A_bin)
    _write_matrix(out.with_name(out.stem + "_hat" + out.suffix), corr.A_hat)
    _say(args, f"wrote {corr.n_labels}x{corr.n_labels} correlation matrices next to {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "dump-corr": cmd_dump_corr,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        parser.print_usage(sys.stderr)
        print(f"corrfuse: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (CohortFormatError, CheckpointError, TrainingDiverged, OSError, ValueError) as err:
        print(f"corrfuse: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
