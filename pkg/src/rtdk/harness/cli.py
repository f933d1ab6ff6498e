"""Command-line entry points: run, ablate, report."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import ConfigError
from .config import ExperimentConfig, ObjectiveSpec
from .report import emit_report, read_raw_csv
from .runner import run_ablation, run_experiment


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_json(args.config) if args.config \
        else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
        overrides["seeds"] = (args.seed,)
    if args.out is not None:
        overrides["out_dir"] = args.out
    if getattr(args, "method", None) is not None:
        overrides["method"] = args.method
    if getattr(args, "objective", None) is not None:
        overrides["objective"] = ObjectiveSpec.parse(args.objective)
    return config.replace(**overrides) if overrides else config


def _parse_sweep(text: str) -> dict:
    key, _, values = text.partition("=")
    values = [v.strip() for v in values.split(",") if v.strip()]
    if key == "lengths":
        return {"subtrajectory_lengths": [int(v) for v in values]}
    if key == "variants":
        return {"surrogate_variants": values}
    raise ConfigError(
        f"sweep must look like lengths=10,30,50 or variants=none,transformer; got {text!r}")


def _add_common(parser):
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="override master seed and eval seeds")
    parser.add_argument("--out", help="override output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtdk",
        description="Meta-learning Bayesian optimization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="pre-train (rtdk) and evaluate one method")
    _add_common(run_p)
    run_p.add_argument("--method", choices=["rtdk", "ei", "pi", "ucb", "random"])
    run_p.add_argument("--objective",
                       help="objective spec, e.g. thomson_slice(16) or powell(8)")

    ablate_p = sub.add_parser("ablate", help="sweep sub-trajectory lengths or "
                                             "surrogate variants")
    _add_common(ablate_p)
    ablate_p.add_argument("--sweep", required=True,
                          help="lengths=10,30,50 or variants=none,feedforward,transformer")

    report_p = sub.add_parser("report", help="rebuild summary/plot from raw records")
    report_p.add_argument("--in", dest="in_dir", required=True)
    report_p.add_argument("--out", dest="out_dir", required=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "run":
        config = _load_config(args)
        result = run_experiment(config)
        print(f"wrote {len(result['records'])} records to {config.out_dir}")
        return 0
    if args.command == "ablate":
        config = _load_config(args)
        results = run_ablation(config, _parse_sweep(args.sweep))
        for tag, result in results.items():
            print(f"{tag}: {len(result['records'])} records -> "
                  f"{result['paths']['summary']}")
        return 0
    if args.command == "report":
        records = read_raw_csv(Path(args.in_dir) / "records_raw.csv")
        paths = emit_report(records, args.out_dir)
        print(f"summary: {paths['summary']}")
        return 0
    return 1


if __name__ == "__main__":
    sys.exit(main())
