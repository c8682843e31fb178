# ---------------------------------------------------
# Main
# /main.py
# ---------------------------------------------------
"""Command line: run one scenario, check a trace file, run a corpus, or
cross-check the serializability checker on micro-histories.

Exit codes: 0 all checks pass, 1 violation (or aborted run), 2 bad
configuration.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import settings
from .harness.checkers import CHECKERS, run_checks
from .harness.corpus import format_table, run_corpus, verdict
from .harness.metrics import compute_metrics
from .harness.micro import run_micro
from .harness.runner import Cluster
from .harness.scenario import ScenarioError, load_scenario
from .services.kernel import ConfigurationError, SimulationAborted, dump_trace, load_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2


def _parse_checks(raw: str) -> List[str]:
    if raw == "all":
        return sorted(CHECKERS)
    names = [n.strip() for n in raw.split(",") if n.strip()]
    unknown = [n for n in names if n not in CHECKERS]
    if unknown:
        raise ConfigurationError(f"unknown checkers {unknown}, known: {sorted(CHECKERS)}")
    return names


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if scenario.sweep is not None and scenario.sweep.action is None:
        # a seed family runs one member, its own seed unless --seed picks another
        scenario = scenario.model_copy(update={"sweep": None})
    if args.seed is not None:
        scenario = scenario.model_copy(update={"seed": args.seed})
    if scenario.sweep is not None:
        raise ScenarioError(f"{scenario.name} is a sweep of {len(scenario.expand())} runs, use 'corpus'")
    cluster = Cluster(scenario).build()
    try:
        trace = cluster.run(args.until)
    except SimulationAborted as e:
        logger.error(f"{scenario.name}: {e}")
        if args.trace_out:
            Path(args.trace_out).write_text(dump_trace(e.trace))
        return EXIT_VIOLATION
    metrics = compute_metrics(trace, scenario.stats_window)
    if args.trace_out:
        Path(args.trace_out).write_text(dump_trace(trace))
    if args.metrics_out:
        Path(args.metrics_out).write_text(metrics.model_dump_json(indent=2))
    if args.prom_out:
        Path(args.prom_out).write_bytes(cluster.exporter.export())

    violations = run_checks(trace)
    print(
        f"{scenario.name} seed={scenario.seed}: {len(trace)} events, "
        f"{metrics.committed} committed, p50={metrics.latency_p50:.0f} p99={metrics.latency_p99:.0f} ticks"
    )
    for violation in violations:
        print(violation)
    tripped = {v.checker for v in violations}
    return EXIT_OK if verdict(tripped, scenario.expect_violations) else EXIT_VIOLATION


def cmd_check(args: argparse.Namespace) -> int:
    names = _parse_checks(args.checks)
    try:
        trace = load_trace(Path(args.trace).read_text())
    except (OSError, ValueError, KeyError) as e:
        raise ConfigurationError(f"cannot read trace {args.trace}: {e}") from e
    violations = run_checks(trace, names)
    for violation in violations:
        print(violation)
    if not violations:
        print(f"{len(trace)} events, {', '.join(names)}: ok")
    return EXIT_VIOLATION if violations else EXIT_OK


def cmd_corpus(args: argparse.Namespace) -> int:
    rows = run_corpus(Path(args.dir), jobs=args.jobs)
    print(format_table(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_VIOLATION


def cmd_micro(args: argparse.Namespace) -> int:
    if args.count < 1:
        raise ConfigurationError("--count must be at least 1")
    report = run_micro(args.count, args.seed)
    for mismatch in report.mismatches:
        print(f"seed {mismatch.seed}: conflict graph says {mismatch.graph_ok}, serial oracle says {mismatch.oracle_ok}")
    print(
        f"{report.histories} micro-histories, {report.serializable} serializable, "
        f"{len(report.mismatches)} mismatches"
    )
    return EXIT_OK if report.passed else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mimir", description="Elastic transactional store simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--scenario", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--until", type=int)
    run.add_argument("--trace-out")
    run.add_argument("--metrics-out")
    run.add_argument("--prom-out")
    run.set_defaults(func=cmd_run)

    check = sub.add_parser("check", help="run checkers over a trace file")
    check.add_argument("--trace", required=True)
    check.add_argument("--checks", default="all")
    check.set_defaults(func=cmd_check)

    corpus = sub.add_parser("corpus", help="run every scenario of a directory")
    corpus.add_argument("--dir", required=True)
    corpus.add_argument("--jobs", type=int, default=1)
    corpus.set_defaults(func=cmd_corpus)

    micro = sub.add_parser("micro", help="cross-check the serializability checker on random small histories")
    micro.add_argument("--count", type=int, default=500)
    micro.add_argument("--seed", type=int, default=0)
    micro.set_defaults(func=cmd_micro)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL, format=settings.LOG_FORMAT)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ConfigurationError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
