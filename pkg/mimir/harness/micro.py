# ---------------------------------------------------
# Micro-histories
# /harness/micro.py
# ---------------------------------------------------
"""Small random single-partition histories for cross-checking the
serializability checker against the brute-force serial oracle.

Transactions read committed values without locking and install their
writes at commit, so lost updates and write skew come up often. Every
written key is read first by the same transaction; for such histories a
conflict cycle exists exactly when no serial order explains the reads
and the final state, so the two verdicts must agree.
"""
import logging
from typing import Dict, List, Optional, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, Field

from ..services.kernel import TraceEvent, TraceKind
from .checkers import ORACLE_LIMIT, check_serializability, committed_units, conflict_graph, final_state, serial_oracle

logger = logging.getLogger(__name__)

MAX_KEYS = 5
MAX_KEYS_PER_TXN = 3


class MicroVerdict(BaseModel):
    seed: int
    transactions: int
    graph_ok: bool
    oracle_ok: bool
    checker_ok: bool

    @property
    def agrees(self) -> bool:
        return self.graph_ok == self.oracle_ok == self.checker_ok


class MicroReport(BaseModel):
    histories: int = 0
    serializable: int = 0
    mismatches: List[MicroVerdict] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.mismatches


def gen_micro_history(seed: int, max_txns: int = ORACLE_LIMIT, max_keys: int = MAX_KEYS) -> List[TraceEvent]:
    rng = np.random.default_rng([seed, max_txns, max_keys])
    txns = int(rng.integers(1, max_txns + 1))
    keys = [f"k{i}" for i in range(int(rng.integers(1, max_keys + 1)))]

    programs: Dict[str, List[Tuple[str, Optional[str]]]] = {}
    for t in range(txns):
        count = int(rng.integers(1, min(MAX_KEYS_PER_TXN, len(keys)) + 1))
        ops: List[Tuple[str, Optional[str]]] = []
        for key in rng.choice(keys, size=count, replace=False):
            ops.append(("read", str(key)))
            if rng.random() < 0.5:
                ops.append(("write", str(key)))
        programs[f"t{t}"] = ops + [("commit", None)]

    trace: List[TraceEvent] = []

    def note(name: str, **payload) -> None:
        payload["event"] = name
        payload["partition"] = 0
        trace.append(TraceEvent(len(trace), len(trace), "otm0", TraceKind.LOCAL, payload))

    committed: Dict[str, str] = {}
    reads: Dict[str, Dict[str, Optional[str]]] = {t: {} for t in programs}
    writes: Dict[str, Dict[str, str]] = {t: {} for t in programs}
    while programs:
        txn = str(rng.choice(sorted(programs)))
        action, key = programs[txn].pop(0)
        if action == "read":
            reads[txn][key] = committed.get(key)
            note("TXN_READ", txn=txn, key=key, value=reads[txn][key], own=False)
        elif action == "write":
            writes[txn][key] = f"{txn}.{key}"
            note("TXN_WRITE", txn=txn, key=key, value=writes[txn][key])
        else:
            committed.update(writes[txn])
            note("COMMIT", txn=txn, reads=reads[txn], writes=writes[txn])
            del programs[txn]
    return trace


def judge_micro(seed: int) -> MicroVerdict:
    trace = gen_micro_history(seed)
    units = committed_units(trace, 0)
    graph, ghost = conflict_graph(units)
    return MicroVerdict(
        seed=seed,
        transactions=len(units),
        graph_ok=ghost is None and nx.is_directed_acyclic_graph(graph),
        oracle_ok=serial_oracle(units, final_state(trace, 0, units)) is not None,
        checker_ok=check_serializability(trace, 0) is None,
    )


def run_micro(count: int, seed: int = 0) -> MicroReport:
    report = MicroReport()
    for s in range(seed, seed + count):
        verdict = judge_micro(s)
        report.histories += 1
        report.serializable += verdict.oracle_ok
        if not verdict.agrees:
            logger.warning(f"micro-history {s}: graph={verdict.graph_ok} oracle={verdict.oracle_ok}")
            report.mismatches.append(verdict)
    return report
