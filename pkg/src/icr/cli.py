"""Command-line entry point (``icr``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from icr import __version__
from icr.baselines import METHODS
from icr.config import ConfigError, load_config
from icr.pipeline import Pipeline

EXIT_CONFIG = 2
EXIT_FAILURE = 1


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config (default: $ICR_CONFIG, then built-in defaults)")
    common.add_argument("--out", help="output directory (default: config out_dir)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for simulation")
    common.add_argument("--seed-filter", help='restrict episodes, e.g. "IC1,IC2:1201+1203"')
    common.add_argument("--method", default="pns_greedy_pruned", choices=METHODS)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="icr", description="Invariant causal routing pipeline.")
    p.add_argument("--version", action="version", version=f"icr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate every (IC, seed, regime) episode")
    sub.add_parser("stage1", parents=[common], help="estimate PNS and write the contract pool")
    sub.add_parser("stage2", parents=[common], help="learn routers for --method and write metric rows")
    s3 = sub.add_parser("stage3", parents=[common], help="key-factor attribution")
    s3.add_argument("--route", help='route id "NORM|BASE>CUR|TARGETS|PSI" (default: every rule of --method)')
    sub.add_parser("ablate", parents=[common], help="run all eight methods and write the comparison table")
    sub.add_parser("report", parents=[common], help="write trajectory and factor plot data")
    sub.add_parser("validate-config", parents=[common], help="load and validate a config, print its hash")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config)
        if args.command == "validate-config":
            result = {"config_hash": config.hash(),
                      "seeds": {ic: {k: list(v) for k, v in sp.items()} for ic, sp in config.splits().items()}}
        else:
            pipe = Pipeline(config, args.out, args.jobs, args.seed_filter)
            result = {"command": args.command, "out": str(pipe.out)}
            if args.command == "simulate":
                recs = pipe.simulate()
                result["episodes"] = sum(len(a) for a in recs.values())
            elif args.command == "stage1":
                result["contracts"] = str(pipe.stage1())
            elif args.command == "stage2":
                rp, mp = pipe.stage2(args.method)
                result.update(routers=str(rp), metrics=str(mp))
            elif args.command == "stage3":
                result["report"] = str(pipe.stage3(args.route, args.method))
            elif args.command == "ablate":
                path = pipe.ablate()
                result["table"] = str(path)
                sys.stderr.write((path.parent / "table2.txt").read_text())
            elif args.command == "report":
                result["bundle"] = str(pipe.report())
    except ConfigError as e:
        _fail(e, EXIT_CONFIG)
        return EXIT_CONFIG
    except Exception as e:  # every failure leaves a parseable record on stderr
        if getattr(args, "verbose", False):
            logging.exception("failed")
        _fail(e, EXIT_FAILURE)
        return EXIT_FAILURE
    print(json.dumps({"ok": True, **result}, sort_keys=True))
    return 0


def _fail(e: Exception, code: int) -> None:
    sys.stderr.write(json.dumps({"ok": False, "error": type(e).__name__, "message": str(e), "exit": code},
                                sort_keys=True) + "\n")


if __name__ == "__main__":
    raise SystemExit(main())
