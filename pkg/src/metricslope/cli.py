"""Command line entry point: ``run``, ``list`` and ``check``."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from . import diagnostics as dg
from . import harness
from .errors import ConfigError, InvalidArgumentError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="metricslope",
        description="Run slope/KL/MM experiments and check descent inequalities.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--format", choices=("text", "json"), default="text")
    ls = sub.add_parser("list", help="list problems, solvers and checks")
    ls.add_argument("--json", action="store_true")
    c = sub.add_parser("check", help="run a config's checks against a stored trace")
    c.add_argument("trace")
    c.add_argument("--against", required=True, metavar="CONFIG")
    c.add_argument("--format", choices=("text", "json"), default="text")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list":
        listing = harness.registry_list()
        if args.json:
            print(json.dumps(listing, indent=2))
        else:
            for kind, ids in listing.items():
                print(f"{kind}:")
                for i in ids:
                    print(f"  {i}")
        return harness.EXIT_PASS
    try:
        cfg = harness.load_config(args.config if args.command == "run" else args.against)
        if args.command == "run":
            _, rows = harness.run_experiment(cfg)
        else:
            try:
                with open(args.trace, encoding="utf-8") as fh:
                    trace = dg.trace_from_csv(fh.read())
            except (OSError, InvalidArgumentError, ValueError) as exc:
                raise ConfigError(f"cannot load trace {args.trace}: {exc}") from None
            rows = harness.check_trace(trace, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    if not rows:
        print("no checks requested")
        return harness.EXIT_PASS
    hdr = {"problem_id": cfg.problem_id, "solver_id": cfg.solver_id}
    sys.stdout.write(harness.emit_report(rows, args.format, hdr))
    return harness.exit_code(rows)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
