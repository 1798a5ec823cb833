"""Command-line interface: synth | train | fit-stats | score | eval | report.

Every command takes --config, --seed and --out-dir; --seed overrides the
config's seeds. Commands exit 0 on success and print one machine-readable
JSON error line to stderr otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .errors import EbadError
from .pipeline import (
    run_eval,
    run_fit_stats,
    run_report,
    run_score,
    run_synth,
    run_train,
)


def _add_common(parser, config_required=True):
    parser.add_argument("--config", required=config_required,
                        help="run-config YAML file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's seeds")
    parser.add_argument("--out-dir", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebad",
        description="Energy-based visual anomaly detection and localization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic MVTec-layout dataset")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an energy model on the train split")
    _add_common(p)
    p.add_argument("--quiet", action="store_true", help="suppress per-iteration lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-stats", help="fit per-pixel gradient statistics on the train split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (.ebm)")
    p.set_defaults(func=cmd_fit_stats)

    p = sub.add_parser("score", help="score the test split into maps and image scores")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (.ebm)")
    p.add_argument("--stats", required=True, help="pixel statistics file (.ebs)")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel scoring workers (each image writes its own files)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="compute AUROC tables, ROC curves and histograms")
    _add_common(p)
    p.add_argument("--scores-dir", required=True, help="directory written by 'score'")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate raw vs standardized results")
    _add_common(p, config_required=False)
    p.add_argument("--eval-dir", action="append", required=True,
                   help="directory written by 'eval' (repeatable)")
    p.set_defaults(func=cmd_report)
    return parser


def cmd_synth(args) -> None:
    config = load_config(args.config, seed_override=args.seed)
    category_dir = run_synth(config, args.out_dir)
    print(f"dataset written to {category_dir}")


def cmd_train(args) -> None:
    config = load_config(args.config, seed_override=args.seed)
    log = None
    if not args.quiet:
        def log(rec):
            print(f"iter {rec.iteration}: pos={rec.pos_energy:.4f} "
                  f"neg={rec.neg_energy:.4f} gap={rec.gap:.4f} "
                  f"grad_norm={rec.grad_norm:.4f} ({rec.seconds:.1f}s)")
    checkpoint_path, history_path = run_train(config, args.out_dir, log=log)
    print(f"checkpoint: {checkpoint_path}")
    print(f"history: {history_path}")


def cmd_fit_stats(args) -> None:
    config = load_config(args.config, seed_override=args.seed)
    stats_path = run_fit_stats(config, args.checkpoint, args.out_dir)
    print(f"stats: {stats_path}")


def cmd_score(args) -> None:
    config = load_config(args.config, seed_override=args.seed)
    out_dir = run_score(config, args.checkpoint, args.stats, args.out_dir,
                        workers=args.workers)
    print(f"scores: {out_dir}")


def cmd_eval(args) -> None:
    config = load_config(args.config, seed_override=args.seed)
    summary = run_eval(config, args.scores_dir, args.out_dir)
    for task in ("detection", "localization"):
        for kind, value in summary[task].items():
            print(f"{task} AUROC ({kind}): {value:.4f}")


def cmd_report(args) -> None:
    report_path = run_report(args.eval_dir, args.out_dir)
    print(f"report: {report_path}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except EbadError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
