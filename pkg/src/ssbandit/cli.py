"""Command-line entry point: run, aggregate, report, gen-synthetic."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .env import write_bndt
from .errors import BanditError

EXIT_OK, EXIT_DATA, EXIT_IO = 0, 1, 2


def _run(args):
    config = harness.ExperimentConfig.from_file(args.config)
    summary = harness.run_experiment(config)
    print(harness.report(harness.read_summary(config.output_dir / "summary.csv")), end="")
    return summary


def _aggregate(args):
    summary = harness.aggregate(args.dir)
    out = Path(args.out) if args.out else Path(args.dir) / "summary.csv"
    harness.write_summary(summary, out)
    print(harness.report(harness.read_summary(out)), end="")


def _report(args):
    print(harness.report(harness.read_summary(args.summary)), end="")


def _gen_synthetic(args):
    data = harness.synthetic_from_text(Path(args.spec).read_text())
    write_bndt(args.out, data)
    print(f"wrote {len(data)} examples ({data.num_classes} classes, {data.image_shape}) to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssbandit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="play every (solver, seed) run in a config file")
    r.add_argument("config")
    r.set_defaults(func=_run)
    a = sub.add_parser("aggregate", help="summarize a directory of round logs")
    a.add_argument("dir")
    a.add_argument("--out", help="summary CSV path (default <dir>/summary.csv)")
    a.set_defaults(func=_aggregate)
    rep = sub.add_parser("report", help="print tables from a summary CSV")
    rep.add_argument("summary")
    rep.set_defaults(func=_report)
    g = sub.add_parser("gen-synthetic", help="write a synthetic dataset in the generic binary format")
    g.add_argument("spec")
    g.add_argument("out")
    g.set_defaults(func=_gen_synthetic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except BanditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
