"""Command-line entry point.

Subcommands map one-to-one onto the experiment phases:

    converge     TV-versus-step-size sweep with slope fit
    order-study  trajectory error versus an RK4 reference, per scheme
    train-sweep  depth x width training grid with the loss table
    sample       generate samples at one step count, write CSV
    tv           TV between a sample CSV and the analytic target
    oracle-loss  achievable minimum of the noise-prediction loss

Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .errors import ConfigError, NumericError
from .harness import (ExperimentConfig, derive_seed, load_config,
                      measure_kde_floor, report_csv_text, report_json_text,
                      report_to_json_obj, run_convergence_experiment,
                      run_order_study, run_sample_phase, run_training_sweep,
                      _csv_text)
from .metrics import kde_fit, tv_monte_carlo
from .mlp_score import optimal_loss_oracle
from .samplers import read_samples_csv


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML experiment config; defaults apply if omitted")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--format", choices=("csv", "json"), default="json",
                   help="format of the summary printed to stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfsplit", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
            ("converge", "run the TV convergence sweep"),
            ("order-study", "run the trajectory-order study"),
            ("train-sweep", "train the architecture grid")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("sample", help="generate samples and write them as CSV")
    _add_common(p)
    p.add_argument("--steps", type=int, default=None, help="step count T (default: largest configured)")
    p.add_argument("--n", type=int, default=None, help="number of samples (default: metrics.n_samples)")
    p.add_argument("--trajectory", action="store_true", help="also record the integration trajectory")

    p = sub.add_parser("tv", help="TV between a sample file and the analytic target")
    _add_common(p)
    p.add_argument("--samples", required=True, help="CSV sample file with header x1,...,xd")
    p.add_argument("--floor", action="store_true", help="also measure the KDE self-distance floor")

    p = sub.add_parser("oracle-loss", help="print the achievable minimum training loss")
    _add_common(p)
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out"] = args.out
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _print_report(report, fmt: str) -> None:
    if fmt == "csv":
        sys.stdout.write(report_csv_text(report))
    else:
        sys.stdout.write(report_json_text(report_to_json_obj(report)))


def _dispatch(args) -> None:
    cfg = _load(args)
    if args.command == "converge":
        _print_report(run_convergence_experiment(cfg), args.format)
    elif args.command == "order-study":
        _print_report(run_order_study(cfg), args.format)
    elif args.command == "train-sweep":
        _print_report(run_training_sweep(cfg), args.format)
    elif args.command == "sample":
        T = args.steps if args.steps is not None else max(cfg.T_list)
        n = args.n if args.n is not None else cfg.n_samples
        path = run_sample_phase(cfg, T=T, n=n, trajectory=args.trajectory)
        sys.stdout.write(f"{path}\n")
    elif args.command == "tv":
        samples = read_samples_csv(args.samples)
        kde = kde_fit(samples, rule=cfg.bandwidth_rule)
        tv = tv_monte_carlo(kde, cfg.target_law(), cfg.n_mc,
                            derive_seed(cfg.seed, "tv-standalone"))
        obj = {"tv": tv.value, "tv_raw": tv.raw_value, "stderr": tv.stderr,
               "n_mc": tv.n_mc, "n_samples": int(samples.shape[0])}
        if args.floor:
            floor = measure_kde_floor(cfg)
            obj["kde_floor"] = floor.value
            obj["kde_floor_stderr"] = floor.stderr
        _print_obj(obj, args.format)
    elif args.command == "oracle-loss":
        obj = {"optimal_loss": optimal_loss_oracle(cfg.data, cfg.schedule)}
        _print_obj(obj, args.format)


def _print_obj(obj: dict, fmt: str) -> None:
    if fmt == "csv":
        sys.stdout.write(_csv_text(list(obj.keys()), [list(obj.values())]))
    else:
        sys.stdout.write(report_json_text(obj))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
