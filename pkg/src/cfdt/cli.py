"""Command line entry point: ``cfdt {gen,collect,train,eval,report,run}``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import experiment as ex
from .data import DataError
from .dt import TrainingError
from .gridworld import ConfigurationError, GenerationError
from .nn.checkpoint import CheckpointError

# exit codes
OK, USAGE, CONFIG, DATA, RUNTIME = 0, 2, 3, 4, 5


def _build_config(args) -> ex.ExperimentConfig:
    raw = ex.parse_config_text(open(args.config).read()) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        target = raw
        *parents, leaf = key.strip().split(".")
        for p in parents:
            target = target.setdefault(p, {})
        target[leaf] = ex._parse_value(value)
    if args.seed:
        raw["seeds"] = args.seed
    if getattr(args, "scenario", None):
        raw["scenario"] = args.scenario
        raw.pop("n_obstacles_target", None)
    if args.deterministic is not None:
        raw["deterministic"] = args.deterministic
    return ex.ExperimentConfig.from_dict(raw)


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config entry, e.g. --set dt.lr=3e-4 (repeatable)")
    common.add_argument("--seed", action="append", type=int,
                        help="master seed (repeatable; default from config)")
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--scenario", choices=("easy", "hard"))
    det = common.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                     help="single-threaded BLAS and no wall-clock in the report (default)")
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cfdt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="draw source, counterfactual and target layouts")
    sub.add_parser("collect", parents=[common], help="solve the source policy, roll out, estimate ATEs")
    t = sub.add_parser("train", parents=[common], help="train decision transformer variants")
    t.add_argument("--variant", action="append", choices=sorted(ex.DT_VARIANTS),
                   help="variant to train (repeatable; default all)")
    t.add_argument("--cache", help="directory of reusable checkpoints keyed by training inputs")
    e = sub.add_parser("eval", parents=[common], help="evaluate agents on the target layouts")
    e.add_argument("--variant", action="append", choices=list(ex.AGENTS),
                   help="agent to evaluate (repeatable; default all)")
    sub.add_parser("report", parents=[common], help="aggregate evaluations into report.json/csv")
    r = sub.add_parser("run", parents=[common], help="all stages in order")
    r.add_argument("--cache", help="directory of reusable checkpoints keyed by training inputs")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _build_config(args)
    except (OSError, ValueError, TypeError) as err:
        print(f"cfdt: config error: {err}", file=sys.stderr)
        return CONFIG
    try:
        if args.command == "gen":
            ex.cmd_gen(cfg, args.out)
        elif args.command == "collect":
            ex.cmd_collect(cfg, args.out)
        elif args.command == "train":
            for variant in args.variant or list(ex.DT_VARIANTS):
                ex.cmd_train(cfg, args.out, variant, args.cache)
        elif args.command == "eval":
            for agent in args.variant or list(ex.AGENTS):
                ex.cmd_eval(cfg, args.out, agent)
        elif args.command == "report":
            report = ex.cmd_report(cfg, args.out)
            _print_report(report)
        elif args.command == "run":
            _print_report(ex.run_all(cfg, args.out, args.cache))
    except (ConfigurationError, GenerationError) as err:
        print(f"cfdt: {err}", file=sys.stderr)
        return CONFIG
    except (ex.ExperimentError, DataError, CheckpointError) as err:
        print(f"cfdt: {err}", file=sys.stderr)
        return DATA
    except TrainingError as err:
        print(f"cfdt: training failed: {err}", file=sys.stderr)
        return RUNTIME
    return OK


def _print_report(report: dict) -> None:
    print(f"scenario {report['scenario']}, seeds {report['seeds']}")
    print(f"{'agent':<12} {'goal rate':>9} {'return':>8} {'length':>7}")
    for row in report["agents"]:
        print(f"{row['agent']:<12} {row['goal_rate']:>9.3f} {row['mean_return']:>8.3f} "
              f"{row['mean_length']:>7.1f}")
    for c in report["checks"]:
        tag = "PASS" if c["passed"] else "FAIL"
        req = "" if c["required"] else " (informational)"
        print(f"{tag} {c['better']} >= {c['baseline']} + {c['margin']:.2f}{req}")


if __name__ == "__main__":
    raise SystemExit(main())
