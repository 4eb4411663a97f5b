"""Command line: ``stragglerlab {run,compare,sweep}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import ExperimentConfig, load_config
from .consistency import DeadlockError
from .engine import InvariantBreach
from .injector import ConfigurationError
from .paramserver import ContractViolation
from .runner import compare_modes, run_experiment, sweep, with_mode
from .workloads import NumericError, StateCorruptionError

EXIT_OK, EXIT_CONFIG, EXIT_BREACH = 0, 2, 3
_BREACHES = (InvariantBreach, DeadlockError, StateCorruptionError, ContractViolation, NumericError)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default="results", help="output directory (default: results)")
    p.add_argument("--clock", choices=("real", "virtual"), help="override run.clock")
    p.add_argument("--seed", type=int, help="override run.seed and straggler.seed")
    p.add_argument("--verbose", "-v", action="store_true")
    p.add_argument("--overwrite", action="store_true", help="reuse existing run directories")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stragglerlab", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run one configuration")
    p.add_argument("config")
    _common(p)

    p = sub.add_parser("compare", help="run several modes and report deltas vs a baseline")
    p.add_argument("configs", nargs="+")
    p.add_argument("--baseline", default="bsp")
    p.add_argument("--modes", help="comma list (e.g. bsp,ssp,ssp+rr) applied to a single config")
    _common(p)

    p = sub.add_parser("sweep", help="repeat a comparison over values of one parameter")
    p.add_argument("configs", nargs="+")
    p.add_argument("--param", required=True, help="parameter name, e.g. alpha or straggler.alpha")
    p.add_argument("--values", required=True, help="comma separated values")
    p.add_argument("--baseline", default="bsp")
    p.add_argument("--modes", help="comma list of modes applied to each config")
    _common(p)
    return parser


def _load(path: str, args) -> ExperimentConfig:
    cfg = load_config(path)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.clock is not None:
        cfg = cfg.replace(run=dataclasses.replace(cfg.run, clock=args.clock))
    cfg.validate()
    return cfg


def _expand(cfgs: list[ExperimentConfig], modes: str | None) -> list[ExperimentConfig]:
    if not modes:
        return cfgs
    labels = [m.strip() for m in modes.split(",") if m.strip()]
    return [with_mode(c, m) for c in cfgs for m in labels]


def _print_rows(rows) -> None:
    cols = list(rows[0])
    print(",".join(cols))
    for r in rows:
        print(",".join(str(r[c]) for c in cols))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "run":
            out = run_experiment(_load(args.config, args), args.out, overwrite=args.overwrite)
            _print_rows([out.summary_row()])
        elif args.verb == "compare":
            cfgs = _expand([_load(p, args) for p in args.configs], args.modes)
            report = compare_modes(cfgs, args.out, args.baseline, args.overwrite)
            _print_rows(report.rows)
        else:
            cfgs = _expand([_load(p, args) for p in args.configs], args.modes)
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            if not values:
                raise ConfigurationError("--values is empty")
            results = sweep(cfgs, args.param, values, args.out, args.baseline, args.overwrite)
            _print_rows([{"value": v, **r} for v, rep in results for r in rep.rows])
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _BREACHES as exc:
        print(f"invariant breach: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_BREACH
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
