"""Command-line driver: ``occavg <verb> --config PATH [--seed N] [--out DIR] [--threads N]``.

Exit codes: 0 success, 2 configuration or usage error, 3 statistical guard or
resource limit, 4 model violation, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .config import default_config, load_config
from .errors import ModelViolation, OccavgError
from .experiments import COMMANDS
from .reports import ReportWriter, atomic_write

OUT_ENV = "OCCAVG_OUT"  # the only environment setting: output directory override

log = logging.getLogger("occavg")


def build_parser():
    parser = argparse.ArgumentParser(prog="occavg", description="Occupation-measure and averaging experiments.")
    parser.add_argument("--version", action="version", version=f"occavg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "compute-w": "stationary measure polytope: constraints, vertices, support sweep",
        "loms": "convergence of occupation-measure sets to the stationary set",
        "happrox": "weak and strong h-approximation estimates",
        "averaging": "inclusion, optimal value, synthesized plan, tracking and gap",
        "sweep": "averaging pipeline over an epsilon list, with resumable cache",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", metavar="PATH", help="INI config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, metavar="N", help="override [experiment] seed")
        p.add_argument("--out", metavar="DIR", help=f"output directory (else ${OUT_ENV}, else the config)")
        p.add_argument("--threads", type=int, metavar="N", help="override [experiment] threads")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _resolve(args):
    cfg = load_config(args.config) if args.config else default_config()
    overrides = {}
    if args.seed is not None:
        overrides["experiment.seed"] = args.seed
    if args.threads is not None:
        overrides["experiment.threads"] = args.threads
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    out = args.out or os.environ.get(OUT_ENV) or cfg["experiment"]["out"]
    return cfg, out


def run(argv=None):
    """Parse arguments, run one command, and return the exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg, out_dir = _resolve(args)
        writer = ReportWriter(out_dir, cfg, args.command)
        log.info("config hash %s, writing to %s", cfg.hash, out_dir)
        COMMANDS[args.command](cfg, writer)
        writer.finish()
    except ModelViolation as exc:
        path = os.path.join(out_dir, "violation_dump.json")
        atomic_write(path, json.dumps(exc.dump, indent=1, sort_keys=True, default=repr) + "\n")
        print(f"occavg: model violation: {exc} (details in {path})", file=sys.stderr)
        return exc.exit_code
    except OccavgError as exc:
        print(f"occavg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main(argv=None):
    sys.exit(run(argv))
