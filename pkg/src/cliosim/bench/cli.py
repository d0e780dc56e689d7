"""Command-line entry point: ``cliosim run`` and ``cliosim experiment``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..config import ConfigError, SimConfig, load_config
from .experiments import EXPERIMENTS, write_csv
from .runner import run
from .workload import TraceError, load_workload


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cliosim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one workload and write a JSON report")
    p_run.add_argument("--config", help="INI file with [mn] [net] [clib] [cluster] sections")
    p_run.add_argument("--workload", required=True, help="[workload] spec or OP-key trace file")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--out", default="-", help="report path, '-' for stdout")

    p_exp = sub.add_parser("experiment", help="run a named experiment and write a CSV table")
    p_exp.add_argument("--name", required=True, help=", ".join(EXPERIMENTS))
    p_exp.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        try:
            config = load_config(args.config) if args.config else SimConfig()
            workload = load_workload(args.workload)
        except (ConfigError, TraceError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        report = run(config, workload, args.seed).to_json()
        if args.out == "-":
            sys.stdout.write(report)
        else:
            Path(args.out).write_text(report, encoding="utf-8")
        return 0
    if args.name not in EXPERIMENTS:
        parser.error(f"unknown experiment {args.name!r}; choose from {', '.join(EXPERIMENTS)}")
    rows = EXPERIMENTS[args.name]()
    if args.out == "-":
        import csv
        if rows:
            writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    else:
        write_csv(rows, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
