"""Command-line entry point: run one scenario file and write its report.

Exit status is 0 when every check passes, 1 on an oracle or invariant
violation and 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..sim import ConfigError, SimError, load_latency_model
from .report import FORMATS, emit_report
from .scenario import load_scenario, run_scenario

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2

log = logging.getLogger("nprdma_sim.bench")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nprdma-bench",
        description="Run a simulated two-host RDMA benchmark scenario and emit a report.",
    )
    p.add_argument("--scenario", required=True, metavar="FILE",
                   help="flat key=value scenario file")
    p.add_argument("--seed", type=int, default=1, help="RNG seed (default 1)")
    p.add_argument("--out", metavar="PATH", help="report path (default: stdout)")
    p.add_argument("--format", choices=FORMATS, default="tsv", help="report format")
    p.add_argument("--latency-model", metavar="FILE",
                   help="flat key=value file of latency parameters in ns")
    p.add_argument("--dump-mem", metavar="PATH",
                   help="write hex dumps of the final remote buffers here")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        scenario = load_scenario(args.scenario)
        latency = load_latency_model(args.latency_model) if args.latency_model else None
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    dumps: list[str] | None = [] if args.dump_mem else None
    try:
        report = run_scenario(scenario, args.seed, latency, dumps)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_VIOLATION

    try:
        text = emit_report(report, args.format, args.out)
        if args.out is None:
            sys.stdout.write(text)
        if dumps is not None:
            Path(args.dump_mem).write_text("".join(dumps))
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_VIOLATION

    for row in report.rows:
        if not row.oracle_match:
            log.error("oracle mismatch: %s %s size %d", row.mode, row.verb, row.size)
    for v in report.violations:
        log.error("violation: %s", v)
    log.info("%d rows, ok=%s", len(report.rows), report.ok)
    return EXIT_OK if report.ok else EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
