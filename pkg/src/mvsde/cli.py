"""Command-line entry point.

Usage::

    mvsde audit|solve|regularity|gradient|stability|duhamel \
        --config <file.json> --out <dir> [--seed N] [--particles N] [--smoke]

Writes ``summary.json``, ``series_*.csv``, and ``plot_*.gp`` into the output
directory.  Exit codes: 0 when every assertion passed, 2 on assertion
failure, 1 on configuration or runtime error.
"""

from __future__ import annotations

import argparse
import sys
import time

from .errors import MvsdeError
from .experiments import KINDS, emit_report, parse_config, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvsde",
        description="Numerics laboratory for McKean-Vlasov SDEs with "
                    "distribution-dependent diffusion",
    )
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--particles", type=int, default=None,
                       help="override the particle count")
        p.add_argument("--smoke", action="store_true",
                       help="CI smoke mode: shrink particle counts and grids")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = parse_config(args.config, kind=args.kind, seed=args.seed,
                           particles=args.particles, smoke=args.smoke)
        report = run_experiment(cfg, outdir=args.out)
        emit_report(report, args.out)
    except MvsdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - started
    status = "PASS" if report.passed else "FAIL"
    for a in report.assertions:
        mark = "ok" if a.passed else "FAIL"
        print(f"  [{mark}] {a.name}: {a.value:.6g} ({a.detail})", file=sys.stderr)
    print(f"{args.kind}: {status} in {elapsed:.1f}s -> {args.out}", file=sys.stderr)
    return 0 if report.passed else 2


if __name__ == "__main__":
    raise SystemExit(main())
