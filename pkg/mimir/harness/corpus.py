# ---------------------------------------------------
# Corpus
# /harness/corpus.py
# ---------------------------------------------------
"""Runs every scenario of a directory (sweeps expanded) and tabulates the
checker verdicts. Runs are independent, so they can fan out to processes."""
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Set

from pydantic import BaseModel, Field

from ..services.kernel import SimulationAborted
from .checkers import run_checks
from .runner import run_scenario
from .scenario import Scenario, load_scenario

logger = logging.getLogger(__name__)


def verdict(tripped: Set[str], expected: List[str]) -> bool:
    """Clean runs must trip nothing; mutation runs must trip at least what they expect"""
    if expected:
        return set(expected) <= set(tripped)
    return not tripped


class CorpusRow(BaseModel):
    name: str
    committed: int = 0
    events: int = 0
    violations: List[str] = Field(default_factory=list)
    expected: List[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return verdict({v.split("]")[0].lstrip("[") for v in self.violations}, self.expected)


def run_one(scenario: Scenario) -> CorpusRow:
    try:
        trace, metrics = run_scenario(scenario)
    except SimulationAborted as e:
        return CorpusRow(name=scenario.name, events=len(e.trace), violations=[f"[kernel] {e}"])
    return CorpusRow(
        name=scenario.name,
        committed=metrics.committed,
        events=len(trace),
        violations=[str(v) for v in run_checks(trace)],
        expected=scenario.expect_violations,
    )


def load_corpus(directory: Path) -> List[Scenario]:
    runs: List[Scenario] = []
    for path in sorted(Path(directory).glob("*.json")):
        runs.extend(load_scenario(path).expand())
    return runs


def run_corpus(directory: Path, jobs: int = 1) -> List[CorpusRow]:
    runs = load_corpus(directory)
    logger.info(f"corpus {directory}: {len(runs)} runs, {jobs} job(s)")
    if jobs <= 1:
        return [run_one(s) for s in runs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_one, runs))


def format_table(rows: List[CorpusRow]) -> str:
    width = max([len(r.name) for r in rows] + [8])
    lines = [f"{'scenario':<{width}}  result  committed  events", "-" * (width + 33)]
    for row in rows:
        verdict = "PASS" if row.passed else "FAIL"
        lines.append(f"{row.name:<{width}}  {verdict:<6}  {row.committed:>9}  {row.events:>6}")
        if not row.passed:
            for violation in row.violations:
                lines.append(f"    {violation}")
            if row.expected:
                lines.append(f"    expected violations: {row.expected}")
    passed = sum(r.passed for r in rows)
    lines.append(f"{passed}/{len(rows)} passed")
    return "\n".join(lines)
