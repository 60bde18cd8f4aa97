"""Command line: ``cler run`` trains a plan, ``cler report`` tabulates results."""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .config import PRESETS, build_plan, read_config
from .errors import ConfigError


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cler", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every cell of an experiment plan")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="key = value config file (or a preset name)")
    src.add_argument("--preset", choices=sorted(PRESETS))
    run.add_argument("--method")
    run.add_argument("--cler", choices=["none", "rotation", "jigsaw"])
    run.add_argument("--buffer-size", help="one size or a comma list")
    run.add_argument("--lambda-r", type=float)
    run.add_argument("--lr", type=float)
    run.add_argument("--batch-size", type=int)
    run.add_argument("--epochs", type=int)
    run.add_argument("--seeds", help="e.g. 0,1,2 or 0-9")
    run.add_argument("--probes", help="subset of g,i,p,r")
    run.add_argument("--out", help="output directory")
    run.add_argument("--resume", action="store_true", help="skip cells with a valid result file")

    rep = sub.add_parser("report", help="print the comparison table for a result directory")
    rep.add_argument("--in", dest="input", required=True)
    rep.add_argument("--format", choices=["text", "csv"], default="text")

    exp = sub.add_parser("export", help="write plot-ready probe CSV files")
    exp.add_argument("--in", dest="input", required=True)
    exp.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        overrides = {"method": args.method, "cler": args.cler, "buffer_size": args.buffer_size,
                     "lambda_r": args.lambda_r, "lr": args.lr, "batch_size": args.batch_size,
                     "epochs": args.epochs, "seeds": args.seeds, "probes": args.probes, "out": args.out}
        try:
            plan = build_plan(read_config(args.config or args.preset), overrides)
        except ConfigError as err:
            print(f"config error: {err}", file=sys.stderr)
            return 2
        return harness.run(plan, resume=args.resume)
    try:
        if args.command == "report":
            sys.stdout.write(harness.report(args.input, args.format))
        else:
            for path in harness.export_probes(args.input, args.out):
                print(path)
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
