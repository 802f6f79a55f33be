"""Command-line entry point.

    solver run <config> [--key value ...]
    solver rates <config> [--key value ...]
    solver check

Exit codes: 0 success, 2 configuration, 3 solver, 4 numerical, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import VMSFlowError

log = logging.getLogger("vmsflow")


def _parser():
    p = argparse.ArgumentParser(prog="solver", description="Divergence-conforming VMS flow solver")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-v info, -vv debug)")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run one case"), ("rates", "mesh-refinement study")):
        s = sub.add_parser(name, help=text)
        s.add_argument("config", help="key = value configuration file")
    sub.add_parser("check", help="quick invariant self-checks")
    return p


def _load(args, extra):
    from .config import parse_config, parse_overrides

    return parse_config(args.config, parse_overrides(extra))


def main(argv=None):
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check":
            if extra:
                parser.error(f"unexpected arguments {extra}")
            from .checks import run_checks

            results = run_checks()
            for r in results:
                print(r.line())
            return 0 if all(r.passed for r in results) else 4
        cfg = _load(args, extra)
        from .cases import run_case, run_rates

        result = run_rates(cfg) if args.command == "rates" else run_case(cfg)
        print(json.dumps(result.summary, indent=2, sort_keys=True))
        for f in result.files:
            print(f"wrote {f}")
        return 0
    except VMSFlowError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
