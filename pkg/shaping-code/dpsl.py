#!/usr/bin/env python3
"""dpsl.py
usage: dpsl.py [-h] {shape-toy,router-sim,upcycle-check,ablation,specfun-table,prior-marginals} ...

Runs Dirichlet-prior shaping experiments and writes their CSV files, figures and report.

positional arguments:
  {shape-toy,router-sim,upcycle-check,ablation,specfun-table,prior-marginals}
    shape-toy           Shapes free probability vectors from several sources towards their priors.
    router-sim          Trains MoE routers on synthetic tokens under the configured regularizers.
    upcycle-check       Checks that upcycled experts reproduce the dense FFN.
    ablation            Sweeps the symmetric prior concentration and shaping strength of a router-sim config.
    specfun-table       Writes a grid of Beta PDF and CDF values.
    prior-marginals     Tabulates and plots the Beta marginals of a Dirichlet prior.

options:
  -h, --help            show this help message and exit

Exit codes: 0 on success, 2 if the configuration is invalid, 3 if the computation stopped
being finite.
"""

import argparse
import os
import sys
from typing import List, Union

from common import ConfigError, NumericError, add_output_args, ensure_dir, write_csv
from dirichlet import DirichletPrior, marginal_table
from experiment_config import ExperimentConfig
from experiments import ABLATION_ALPHAS, ABLATION_LAMBDAS, run_ablation, run_router_sim, run_shape_toy, run_upcycle_check
from report import emit_report, plot_marginals
from specfun import specfun_table

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def load_config(args: argparse.Namespace, kind: str) -> ExperimentConfig:
    """Loads the config named on the command line and applies --seed / --out."""
    if not args.quiet:
        print(f"Loading the config from '{args.config}'")
    conf = ExperimentConfig.from_file(args.config)
    if conf.kind != kind:
        raise ConfigError(f"'{args.config}' describes a '{conf.kind}' run, not '{kind}'.")
    return conf.with_overrides(seed=getattr(args, "seed", None), output_dir=args.out)


def cmd_shape_toy(args: argparse.Namespace) -> None:
    conf = load_config(args, "shape-toy")
    emit_report(run_shape_toy(conf, not args.quiet), conf.output_dir, not args.quiet)


def cmd_router_sim(args: argparse.Namespace) -> None:
    conf = load_config(args, "router-sim")
    emit_report(run_router_sim(conf, not args.quiet), conf.output_dir, not args.quiet)


def cmd_ablation(args: argparse.Namespace) -> None:
    conf = load_config(args, "router-sim")
    report = run_ablation(conf, args.alphas, args.lambdas, not args.quiet)
    emit_report(report, conf.output_dir, not args.quiet)


def cmd_upcycle_check(args: argparse.Namespace) -> None:
    conf = ExperimentConfig.from_dict(
        {
            "kind": "upcycle-check",
            "seed": args.seed,
            "output_dir": args.out if args.out is not None else "results",
            "moe": {
                "n_experts": args.experts,
                "top_k": min(args.top_k, args.experts),
                "d_model": args.d_model,
                "hidden_dim": args.hidden_dim,
            },
            "upcycle": {
                "granularity": args.granularity,
                "noise_sigma": args.sigma,
                "reinit_ratio": args.reinit_ratio,
                "shard_layout": args.shard_layout,
            },
        }
    )
    report = run_upcycle_check(conf, args.save, not args.quiet)
    emit_report(report, conf.output_dir, not args.quiet)


def cmd_specfun_table(args: argparse.Namespace) -> None:
    folder = os.path.dirname(args.out)
    if folder:
        ensure_dir(folder)
    write_csv(specfun_table(), args.out)
    if not args.quiet:
        print(f"Wrote the Beta function table to '{args.out}'")


def cmd_prior_marginals(args: argparse.Namespace) -> None:
    try:
        prior = DirichletPrior(args.alpha)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    folder = os.path.dirname(args.out)
    if folder:
        ensure_dir(folder)
    table = marginal_table(prior, args.points)
    write_csv(table, args.out)
    figure = os.path.splitext(args.out)[0] + ".svg"
    plot_marginals(table, figure, f"Beta marginals of {prior}")
    if not args.quiet:
        print(f"Wrote '{args.out}' and '{figure}'")


def add_config_args(parser: argparse.ArgumentParser, seed: bool = True) -> None:
    parser.add_argument(
        "-c",
        "--config",
        help="The JSON experiment config to run.",
        type=str,
        required=True,
    )
    if seed:
        parser.add_argument(
            "--seed",
            help="Overrides the seed in the config.",
            type=int,
            default=None,
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Runs Dirichlet-prior shaping experiments and writes their CSV files, figures and report.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    shape_toy = subparsers.add_parser(
        "shape-toy",
        help="Shapes free probability vectors from several sources towards their priors.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    add_config_args(shape_toy)
    add_output_args(shape_toy)
    shape_toy.set_defaults(func=cmd_shape_toy)

    router_sim = subparsers.add_parser(
        "router-sim",
        help="Trains MoE routers on synthetic tokens under the configured regularizers.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    add_config_args(router_sim)
    add_output_args(router_sim)
    router_sim.set_defaults(func=cmd_router_sim)

    upcycle_check = subparsers.add_parser(
        "upcycle-check",
        help="Checks that upcycled experts reproduce the dense FFN.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    upcycle_check.add_argument("-g", "--granularity", help="Shards per dense FFN (G).", type=int, default=1)
    upcycle_check.add_argument("-n", "--experts", help="Total number of experts (N).", type=int, default=4)
    upcycle_check.add_argument("-s", "--sigma", help="Std of the upcycling noise.", type=float, default=0.01)
    upcycle_check.add_argument("-k", "--top-k", help="Experts selected per token.", type=int, default=2)
    upcycle_check.add_argument("--d-model", help="Model dimension.", type=int, default=16)
    upcycle_check.add_argument("--hidden-dim", help="Dense FFN hidden dimension.", type=int, default=32)
    upcycle_check.add_argument("--reinit-ratio", help="Drop-Upcycling re-initialisation ratio.", type=float, default=0.0)
    upcycle_check.add_argument(
        "--shard-layout", help="How hidden units are split into shards.", choices=["contiguous", "strided"], default="contiguous"
    )
    upcycle_check.add_argument("--seed", help="Seed for the dense FFN and noise.", type=int, default=0)
    upcycle_check.add_argument(
        "--save", help="If provided, writes the noisy expert set to this binary file.", type=str, default=None
    )
    add_output_args(upcycle_check)
    upcycle_check.set_defaults(func=cmd_upcycle_check)

    ablation = subparsers.add_parser(
        "ablation",
        help="Sweeps the symmetric prior concentration and shaping strength of a router-sim config.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    add_config_args(ablation)
    ablation.add_argument("--alphas", help="Symmetric concentrations to try.", type=float, nargs="+", default=list(ABLATION_ALPHAS))
    ablation.add_argument("--lambdas", help="Shaping strengths to try.", type=float, nargs="+", default=list(ABLATION_LAMBDAS))
    add_output_args(ablation)
    ablation.set_defaults(func=cmd_ablation)

    table = subparsers.add_parser(
        "specfun-table",
        help="Writes a grid of Beta PDF and CDF values.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    table.add_argument("-o", "--out", help="The CSV file to write.", type=str, default="specfun.csv")
    table.add_argument("-q", "--quiet", help="If present, does not print progress messages.", action="store_true")
    table.set_defaults(func=cmd_specfun_table)

    marginals = subparsers.add_parser(
        "prior-marginals",
        help="Tabulates and plots the Beta marginals of a Dirichlet prior.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    marginals.add_argument("-a", "--alpha", help="Concentration parameters of the prior.", type=float, nargs="+", required=True)
    marginals.add_argument("-p", "--points", help="Number of x values in (0, 1).", type=int, default=199)
    marginals.add_argument("-o", "--out", help="The CSV file to write (the figure goes next to it).", type=str, default="marginals.csv")
    marginals.add_argument("-q", "--quiet", help="If present, does not print progress messages.", action="store_true")
    marginals.set_defaults(func=cmd_prior_marginals)
    return parser


def main(argv: Union[List[str], None] = None) -> int:
    """Parses the arguments, runs the subcommand and maps failures to exit codes."""
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except NumericError as e:
        print(f"Numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as e:
        print(f"Invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
