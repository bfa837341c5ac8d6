"""
`cloudfl` command-line entry point.

    cloudfl run --config configs/default.env --seed 3
    cloudfl compare --config configs/default.env --strategies fedavg,krum,cost_trustfl --attacks none,sign_flip
    cloudfl compare --config configs/default.env --ablation
    cloudfl sweep --config configs/default.env --param lambda --values 0,0.3,1
    cloudfl validate-shapley --config configs/default.env --clients 8 --probe-round 10
"""
import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from cloudfl import __version__
from cloudfl.cli.commands import cmd_compare, cmd_run, cmd_sweep, cmd_validate_shapley
from cloudfl.errors import ConfigurationError

# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed",
    "rounds": "rounds",
    "strategy": "strategy",
    "attack": "attack.kind",
    "malicious_frac": "attack.malicious_fraction",
    "alpha": "alpha",
    "lam": "lambda",
    "gamma": "gamma",
    "name": "name",
}


def _csv_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _float_list(text: str) -> List[float]:
    try:
        return [float(item) for item in _csv_list(text)]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from e


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Flag values as dotted config keys; `--set key=value` pairs come last and win."""
    overrides: Dict[str, Any] = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    for pair in getattr(args, "set", None) or []:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"--set expects key=value, got '{pair}'")
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="dotenv-style key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--rounds", type=int)
    common.add_argument("--strategy", help="fedavg | krum | trimmed_mean | median | fltrust | cost_trustfl")
    common.add_argument("--attack", help="none | label_flip | gaussian | sign_flip | scale")
    common.add_argument("--malicious-frac", dest="malicious_frac", type=float)
    common.add_argument("--alpha", type=float, help="Dirichlet concentration")
    common.add_argument("--lambda", dest="lam", type=float, help="cost exponent in r_hat / c^lambda")
    common.add_argument("--gamma", type=float, help="reputation EMA factor")
    common.add_argument("--name", help="experiment name (run folder suffix)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other config key, repeatable")
    common.add_argument("--output-dir", dest="output_dir", help="write artifacts here instead of runs/<stamp>_<name>")

    parser = argparse.ArgumentParser(prog="cloudfl", description="Hierarchical cost-aware Byzantine-robust FL simulator")
    parser.add_argument("--version", action="version", version=f"cloudfl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="run one experiment")
    run.add_argument("--emit-client-metrics", action="store_true", help="also write clients.csv")

    compare = sub.add_parser("compare", parents=[common], help="strategy x attack grid or ablation table")
    compare.add_argument("--strategies", type=_csv_list, default=None)
    compare.add_argument("--attacks", type=_csv_list, default=None)
    compare.add_argument("--ablation", action="store_true", help="full pipeline plus four knock-out rows")
    compare.add_argument("--jobs", type=int, default=1, help="parallel runs")

    sweep = sub.add_parser("sweep", parents=[common], help="one run per parameter value")
    sweep.add_argument("--param", required=True, help="lambda | malicious_fraction | alpha")
    sweep.add_argument("--values", type=_float_list, required=True)
    sweep.add_argument("--jobs", type=int, default=1, help="parallel runs")

    shapley = sub.add_parser("validate-shapley", parents=[common], help="contribution scores vs Shapley oracles")
    shapley.add_argument("--clients", type=int, default=8)
    shapley.add_argument("--probe-round", dest="probe_round", type=int, default=10)
    shapley.add_argument("--permutations", type=int, default=5000)
    shapley.add_argument("--value", choices=["accuracy", "neg_loss"], default="accuracy")
    return parser


def configure_logging():
    load_dotenv()
    level = os.getenv("CLOUDFL_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        overrides = collect_overrides(args)
    except ConfigurationError as e:
        print(f"cloudfl: configuration error: {e}", file=sys.stderr)
        return e.exit_code

    if args.command == "run":
        return cmd_run(args.config, overrides, args.output_dir, args.emit_client_metrics)
    if args.command == "compare":
        strategies = args.strategies if args.strategies is not None else [overrides.get("strategy", "cost_trustfl")]
        return cmd_compare(args.config, strategies, args.attacks, overrides, args.output_dir,
                           ablation=args.ablation, jobs=args.jobs)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.param, args.values, overrides, args.output_dir, jobs=args.jobs)
    return cmd_validate_shapley(args.config, args.clients, args.probe_round, args.permutations,
                                overrides, args.output_dir, args.value)


if __name__ == "__main__":
    sys.exit(main())
