"""Command line entry point: ``sirpdoa run | validate-config | oracle``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import oracles
from .errors import SirpDoaError
from .harness import load_config, run_experiment, write_plot_data, write_results, write_trials


def _run(args) -> int:
    config = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.trials is not None:
        changes["trials"] = args.trials
    if changes:
        config = config.replace(**changes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = run_experiment(config, parallel=args.parallel)
    csv_path = write_results(table, out / "mse.csv")
    write_plot_data(table, out / "plot_data.json")
    write_trials(table, out / "trials.csv")
    print(csv_path.read_text(), end="")
    for w in table.metadata["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def _validate(args) -> int:
    config = load_config(args.config)
    print(json.dumps(config.to_dict(), indent=2))
    print(f"{args.config}: OK ({len(config.snr_grid_db)} SNR points x {config.trials} trials, "
          f"estimators {', '.join(config.estimators)})", file=sys.stderr)
    return 0


def _oracle(args) -> int:
    results = oracles.run_suite(args.suite, instances=args.instances, seed=args.seed)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sirpdoa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte-Carlo MSE-vs-SNR experiment")
    run.add_argument("--config", required=True, help="experiment JSON file")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override master_seed (u64)")
    run.add_argument("--parallel", type=int, default=1, help="worker processes")
    run.add_argument("--trials", type=int, default=None, help="override the trial count")
    run.set_defaults(func=_run)

    val = sub.add_parser("validate-config", help="check an experiment JSON file")
    val.add_argument("config")
    val.set_defaults(func=_validate)

    orc = sub.add_parser("oracle", help="compare closed forms with brute-force optimizers")
    orc.add_argument("suite", choices=sorted(oracles.SUITES) + ["all"])
    orc.add_argument("--instances", type=int, default=100)
    orc.add_argument("--seed", type=int, default=0)
    orc.set_defaults(func=_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SirpDoaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
