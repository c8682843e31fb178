# ---------------------------------------------------
# Checkers
# /harness/checkers.py
# ---------------------------------------------------
"""Post-hoc invariant checkers over a completed trace.

Each checker returns None when the trace is clean, otherwise the first
Violation it finds, citing the trace events that exhibit it. Values
written by the workload are unique, which is what lets a read be traced
back to the transaction that wrote it.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import networkx as nx
from pydantic import BaseModel, Field

from ..services.kernel import TraceEvent, TraceKind

logger = logging.getLogger(__name__)

ORACLE_LIMIT = 5


class Violation(BaseModel):
    checker: str
    seqs: List[int] = Field(default_factory=list)
    explanation: str

    def __str__(self) -> str:
        return f"[{self.checker}] {self.explanation} (events {self.seqs})"


def scenario_header(trace: List[TraceEvent]) -> Dict:
    for event in trace:
        if event.event == "SCENARIO":
            return event.payload
    return {}


def _events(trace: List[TraceEvent], *names: str):
    for event in trace:
        if event.kind == TraceKind.LOCAL and event.event in names:
            yield event


# ---------------------------------------------------
# Serializability
# ---------------------------------------------------
@dataclass
class _Unit:
    """One committed transaction, or one minitransaction's fragment"""

    uid: str
    seq: int
    reads: Dict[str, Optional[str]] = field(default_factory=dict)
    writes: Dict[str, str] = field(default_factory=dict)
    read_seqs: Dict[str, int] = field(default_factory=dict)
    write_seqs: Dict[str, int] = field(default_factory=dict)


def committed_units(trace: List[TraceEvent], partition: int) -> List[_Unit]:
    reads_at: Dict[Tuple[str, str], int] = {}
    writes_at: Dict[Tuple[str, str], int] = {}
    votes: Dict[str, TraceEvent] = {}
    units: Dict[str, _Unit] = {}
    for event in _events(trace, "TXN_READ", "TXN_WRITE", "MTX_VOTE", "COMMIT", "MTX_APPLY"):
        p = event.payload
        if p.get("partition") != partition:
            continue
        name = event.event
        if name == "TXN_READ" and not p.get("own"):
            reads_at.setdefault((p["txn"], p["key"]), event.seq)
        elif name == "TXN_WRITE":
            writes_at[(p["txn"], p["key"])] = event.seq
        elif name == "MTX_VOTE" and p.get("vote") == "YES":
            votes[p["mtx"]] = event
        elif name == "COMMIT" and p["txn"] not in units:
            units[p["txn"]] = _Unit(
                uid=p["txn"],
                seq=event.seq,
                reads=dict(p.get("reads", {})),
                writes=dict(p.get("writes", {})),
                read_seqs={k: reads_at.get((p["txn"], k), event.seq) for k in p.get("reads", {})},
                write_seqs={k: writes_at.get((p["txn"], k), event.seq) for k in p.get("writes", {})},
            )
        elif name == "MTX_APPLY":
            uid = f"mtx:{p['mtx']}"
            if uid in units:
                continue
            vote = votes.get(p["mtx"])
            reads: Dict[str, Optional[str]] = {}
            if vote is not None:
                reads.update({k: pair[1] for k, pair in vote.payload.get("compares", {}).items()})
                reads.update(vote.payload.get("reads", {}))
            vote_seq = vote.seq if vote is not None else event.seq
            units[uid] = _Unit(
                uid=uid,
                seq=event.seq,
                reads=reads,
                writes=dict(p.get("writes", {})),
                read_seqs={k: vote_seq for k in reads},
                write_seqs={k: event.seq for k in p.get("writes", {})},
            )
    return sorted(units.values(), key=lambda u: u.seq)


def conflict_graph(units: List[_Unit]) -> Tuple[nx.DiGraph, Optional[Violation]]:
    """WR, WW and RW edges; each edge carries the two events that order it"""
    graph = nx.DiGraph()
    graph.add_nodes_from(u.uid for u in units)
    by_id = {u.uid: u for u in units}
    versions: Dict[str, List[str]] = {}
    writer_of: Dict[Tuple[str, str], str] = {}
    for unit in units:
        for key, value in unit.writes.items():
            versions.setdefault(key, []).append(unit.uid)
            writer_of[(key, value)] = unit.uid

    def edge(a: str, b: str, seqs: Tuple[int, int], kind: str, key: str) -> None:
        if a != b and not graph.has_edge(a, b):
            graph.add_edge(a, b, seqs=seqs, kind=kind, key=key)

    for key, writers in versions.items():
        for a, b in zip(writers, writers[1:]):
            edge(a, b, (by_id[a].write_seqs[key], by_id[b].write_seqs[key]), "ww", key)

    for reader in units:
        for key, value in reader.reads.items():
            source = None
            if value is not None:
                source = writer_of.get((key, value))
                if source is None:
                    return graph, Violation(
                        checker="serializability",
                        seqs=[reader.read_seqs[key]],
                        explanation=f"{reader.uid} read {key}={value!r}, a value no committed transaction wrote",
                    )
                edge(source, reader.uid, (by_id[source].write_seqs[key], reader.read_seqs[key]), "wr", key)
            writers = [w for w in versions.get(key, []) if w != reader.uid]
            after = writers.index(source) + 1 if source in writers else 0
            if after < len(writers):
                nxt = writers[after]
                edge(reader.uid, nxt, (reader.read_seqs[key], by_id[nxt].write_seqs[key]), "rw", key)
    return graph, None


def serial_oracle(units: List[_Unit], final: Dict[str, str]) -> Optional[List[str]]:
    """A serial order reproducing every read and the final state, if one exists"""
    for order in itertools.permutations(units):
        state: Dict[str, str] = {}
        consistent = True
        for unit in order:
            if any(state.get(k) != v for k, v in unit.reads.items()):
                consistent = False
                break
            state.update(unit.writes)
        if consistent and state == final:
            return [u.uid for u in order]
    return None


def final_state(trace: List[TraceEvent], partition: int, units: List[_Unit]) -> Dict[str, str]:
    audits = [e for e in _events(trace, "AUDIT") if e.payload.get("partition") == partition]
    if audits:
        return dict(audits[-1].payload["state"])
    state: Dict[str, str] = {}
    for unit in units:
        state.update(unit.writes)
    return state


def check_serializability(trace: List[TraceEvent], partition: int) -> Optional[Violation]:
    units = committed_units(trace, partition)
    graph, violation = conflict_graph(units)
    if violation is not None:
        return violation
    try:
        cycle = nx.find_cycle(graph)
    except nx.NetworkXNoCycle:
        cycle = None
    if cycle:
        seqs = sorted({s for a, b in cycle for s in graph.edges[a, b]["seqs"]})
        path = " -> ".join([a for a, _ in cycle] + [cycle[-1][1]])
        kinds = ", ".join(f"{graph.edges[a, b]['kind']}({graph.edges[a, b]['key']})" for a, b in cycle)
        return Violation(
            checker="serializability",
            seqs=seqs,
            explanation=f"p{partition}: conflict cycle {path} via {kinds}",
        )
    if 0 < len(units) <= ORACLE_LIMIT:
        if serial_oracle(units, final_state(trace, partition, units)) is None:
            return Violation(
                checker="serializability",
                seqs=[u.seq for u in units],
                explanation=f"p{partition}: no serial order of {len(units)} transactions explains the history",
            )
    return None


# ---------------------------------------------------
# Durability
# ---------------------------------------------------
def check_durability(trace: List[TraceEvent]) -> Optional[Violation]:
    """Every read after a commit sees the latest committed value of its key"""
    committed: Dict[Tuple[int, str], Tuple[str, int]] = {}

    def check(event: TraceEvent, partition: int, key: str, value: Optional[str], what: str) -> Optional[Violation]:
        expected, seq = committed.get((partition, key), (None, None))
        if value == expected:
            return None
        cited = [seq, event.seq] if seq is not None else [event.seq]
        return Violation(
            checker="durability",
            seqs=cited,
            explanation=(
                f"{what} of {key} on p{partition} at {event.node} returned {value!r}, "
                f"latest committed value is {expected!r}"
            ),
        )

    for event in _events(trace, "COMMIT", "MTX_APPLY", "TXN_READ", "RO_READ", "MTX_VOTE", "AUDIT"):
        p = event.payload
        pid = p.get("partition")
        name = event.event
        found = None
        if name in ("COMMIT", "MTX_APPLY"):
            for key, value in p.get("writes", {}).items():
                committed[(pid, key)] = (value, event.seq)
        elif name == "TXN_READ" and not p.get("own"):
            found = check(event, pid, p["key"], p.get("value"), "read")
        elif name == "RO_READ":
            found = check(event, pid, p["key"], p.get("value"), "read-only read")
        elif name == "MTX_VOTE":
            for key, pair in sorted(p.get("compares", {}).items()):
                found = found or check(event, pid, key, pair[1], "compare")
            for key, value in sorted(p.get("reads", {}).items()):
                found = found or check(event, pid, key, value, "minitransaction read")
        elif name == "AUDIT":
            state = p.get("state", {})
            keys = sorted(set(state) | {k for (q, k) in committed if q == pid})
            for key in keys:
                found = found or check(event, pid, key, state.get(key), "final audit")
        if found is not None:
            return found
    return None


# ---------------------------------------------------
# Single ownership
# ---------------------------------------------------
def serving_intervals(trace: List[TraceEvent]) -> Dict[int, List[Tuple[int, int, str, int]]]:
    """partition -> [(first seq, last seq, otm, epoch)], OPENED up to the last ADMIT"""
    spans: Dict[Tuple[int, str, int], List[int]] = {}
    for event in _events(trace, "OPENED", "ADMIT"):
        key = (event.payload["partition"], event.node, event.payload["epoch"])
        if event.event == "OPENED":
            spans.setdefault(key, [event.seq, event.seq])
        elif key in spans:
            spans[key][1] = event.seq
    intervals: Dict[int, List[Tuple[int, int, str, int]]] = {}
    for (pid, otm, epoch), (start, end) in spans.items():
        intervals.setdefault(pid, []).append((start, end, otm, epoch))
    return {pid: sorted(spans_) for pid, spans_ in sorted(intervals.items())}


def check_single_ownership(trace: List[TraceEvent]) -> Optional[Violation]:
    for pid, intervals in serving_intervals(trace).items():
        for (s1, e1, o1, ep1), (s2, e2, o2, ep2) in itertools.combinations(intervals, 2):
            if s1 < e2 and s2 < e1:
                return Violation(
                    checker="single_ownership",
                    seqs=[s1, e1, s2, e2],
                    explanation=(
                        f"p{pid} served by {o1} (epoch {ep1}) and {o2} (epoch {ep2}) at the same time"
                    ),
                )
    highest: Dict[str, int] = {}
    for event in trace:
        volume = event.payload.get("volume")
        if event.kind == TraceKind.VOLUME_APPEND:
            if event.payload["epoch"] < highest.get(volume, 0):
                return Violation(
                    checker="single_ownership",
                    seqs=[event.seq],
                    explanation=(
                        f"{volume} accepted an append at epoch {event.payload['epoch']} "
                        f"from {event.node} after epoch {highest[volume]}"
                    ),
                )
            highest[volume] = max(highest.get(volume, 0), event.payload["epoch"])
        elif event.event == "ATTACH":
            highest[volume] = max(highest.get(volume, 0), event.payload["epoch"])
    return None


# ---------------------------------------------------
# Minitransaction atomicity
# ---------------------------------------------------
def check_mtx_atomicity(trace: List[TraceEvent]) -> Optional[Violation]:
    header = scenario_header(trace)
    end = trace[-1].time if trace else 0
    settle = header.get("lease_duration", 0) + 10 * header.get("mtx_timeout", 0)
    decisions: Dict[str, Dict[str, int]] = {}
    yes_votes: Dict[str, Dict[int, int]] = {}
    committed_at: Dict[Tuple[str, int], int] = {}
    applied: Dict[Tuple[str, int], int] = {}
    decided_time: Dict[str, int] = {}

    for event in _events(trace, "MTX_DECIDE", "MTX_RESOLVE", "MTX_DECISION", "MTX_VOTE", "MTX_APPLY"):
        p = event.payload
        mtx = p["mtx"]
        name = event.event
        if name in ("MTX_DECIDE", "MTX_RESOLVE", "MTX_DECISION"):
            seen = decisions.setdefault(mtx, {})
            seen.setdefault(p["decision"], event.seq)
            decided_time.setdefault(mtx, event.time)
            if len(seen) > 1:
                return Violation(
                    checker="mtx_atomicity",
                    seqs=sorted(seen.values()),
                    explanation=f"{mtx} decided both {' and '.join(sorted(seen))}",
                )
            if name == "MTX_DECISION" and p["decision"] == "COMMIT":
                committed_at.setdefault((mtx, p["partition"]), event.seq)
            if name == "MTX_RESOLVE" and p["decision"] == "COMMIT":
                missing = [q for q in p.get("participants", []) if q not in yes_votes.get(mtx, {})]
                if missing:
                    return Violation(
                        checker="mtx_atomicity",
                        seqs=[event.seq],
                        explanation=f"{mtx} resolved COMMIT without a YES vote from {missing}",
                    )
        elif name == "MTX_VOTE":
            if p["vote"] == "YES":
                mismatched = {k: v for k, v in p.get("compares", {}).items() if v[0] != v[1]}
                if mismatched:
                    return Violation(
                        checker="mtx_atomicity",
                        seqs=[event.seq],
                        explanation=f"{mtx} voted YES on p{p['partition']} with failing compares {mismatched}",
                    )
                yes_votes.setdefault(mtx, {})[p["partition"]] = event.seq
        elif name == "MTX_APPLY":
            key = (mtx, p["partition"])
            if key in applied:
                return Violation(
                    checker="mtx_atomicity",
                    seqs=[applied[key], event.seq],
                    explanation=f"{mtx} applied twice on p{p['partition']}",
                )
            applied[key] = event.seq
            if key not in committed_at:
                return Violation(
                    checker="mtx_atomicity",
                    seqs=[event.seq],
                    explanation=f"{mtx} applied on p{p['partition']} before any COMMIT decision reached it",
                )

    for mtx, seen in sorted(decisions.items()):
        if "COMMIT" not in seen or decided_time[mtx] > end - settle:
            continue
        for pid, vote_seq in sorted(yes_votes.get(mtx, {}).items()):
            if (mtx, pid) not in applied:
                return Violation(
                    checker="mtx_atomicity",
                    seqs=[seen["COMMIT"], vote_seq],
                    explanation=f"{mtx} committed but never applied on p{pid}",
                )
    return None


# ---------------------------------------------------
# Elasticity
# ---------------------------------------------------
SPAWN_WINDOWS = 3
OVERLOAD_WINDOWS = 5
RETIRE_WINDOWS = 5


def check_elasticity(trace: List[TraceEvent], metrics=None, header: Optional[Dict] = None) -> Optional[Violation]:
    """Controller reactions measured on the master's planner ticks"""
    header = header or scenario_header(trace)
    if not header.get("elastic", True) or not trace:
        return None
    window = header.get("stats_window", 5_000)
    t_high = header.get("t_high", 100)
    t_low = header.get("t_low", 10)
    min_otms = header.get("min_otms", 1)
    end = trace[-1].time
    # skipped ticks take no action but still count toward an overload streak
    plans = list(_events(trace, "PLAN", "PLAN_SKIPPED"))
    reactions = list(_events(trace, "SPAWN", "MIGRATE_PHASE4"))
    retires = list(_events(trace, "RETIRE"))

    streak: Dict[str, List[int]] = {}
    low_streak: List[TraceEvent] = []
    for plan in plans:
        per_otm = plan.payload.get("per_otm", {})
        saturated = set(plan.payload.get("saturated", []))
        hot = [o for o, load in per_otm.items() if load > t_high and o not in saturated]
        acted = plan.event == "PLAN"
        if not acted and "per_otm" not in plan.payload:
            continue

        if acted and hot and plan.time + SPAWN_WINDOWS * window <= end:
            if not any(plan.seq < r.seq and r.time <= plan.time + SPAWN_WINDOWS * window for r in reactions):
                return Violation(
                    checker="elasticity",
                    seqs=[plan.seq],
                    explanation=(
                        f"{sorted(hot)} above t_high={t_high} and no spawn or move "
                        f"within {SPAWN_WINDOWS} windows"
                    ),
                )
        for otm in list(streak):
            if otm not in hot:
                del streak[otm]
        for otm in hot:
            streak.setdefault(otm, []).append(plan.seq)
            if len(streak[otm]) > OVERLOAD_WINDOWS:
                return Violation(
                    checker="elasticity",
                    seqs=streak[otm],
                    explanation=f"{otm} above t_high={t_high} for more than {OVERLOAD_WINDOWS} windows",
                )

        if not acted:
            continue
        idle = len(per_otm) > min_otms and all(load < t_low for load in per_otm.values())
        low_streak = low_streak + [plan] if idle else []
        if len(low_streak) >= 2:
            first = low_streak[0]
            if first.time + RETIRE_WINDOWS * window <= end and not any(
                first.seq < r.seq and r.time <= first.time + RETIRE_WINDOWS * window for r in retires
            ):
                return Violation(
                    checker="elasticity",
                    seqs=[first.seq, plan.seq],
                    explanation=(
                        f"load below t_low={t_low} on {len(per_otm)} OTMs and no retire "
                        f"within {RETIRE_WINDOWS} windows"
                    ),
                )
    return None


# ---------------------------------------------------
# Strict two-phase locking
# ---------------------------------------------------
def check_strict_2pl(trace: List[TraceEvent]) -> Optional[Violation]:
    """Locks go only after the holder finished, and none are taken afterwards"""
    ended: Dict[Tuple[int, str], int] = {}
    released: Dict[Tuple[int, str], int] = {}
    names = ("COMMIT", "TXN_ABORT", "MTX_DECISION", "MTX_VOTE", "LOCKS_RELEASED", "TXN_READ", "TXN_WRITE")
    for event in _events(trace, *names):
        p = event.payload
        pid = p.get("partition")
        name = event.event
        if name in ("COMMIT", "TXN_ABORT"):
            ended[(pid, p["txn"])] = event.seq
        elif name == "MTX_DECISION" or (name == "MTX_VOTE" and p.get("vote") == "NO"):
            ended[(pid, f"mtx:{p['mtx']}")] = event.seq
        elif name == "LOCKS_RELEASED":
            holder = (pid, p["txn"])
            if holder not in ended:
                return Violation(
                    checker="strict_2pl",
                    seqs=[event.seq],
                    explanation=f"{p['txn']} released {p.get('keys', [])} on p{pid} before it committed or aborted",
                )
            released[holder] = event.seq
        elif name in ("TXN_READ", "TXN_WRITE") and (pid, p["txn"]) in released:
            return Violation(
                checker="strict_2pl",
                seqs=[released[(pid, p["txn"])], event.seq],
                explanation=f"{p['txn']} kept working on p{pid} after releasing its locks",
            )
    return None


# ---------------------------------------------------
# Registry
# ---------------------------------------------------
def _serializability_all(trace: List[TraceEvent]) -> Optional[Violation]:
    header = scenario_header(trace)
    partitions = set(range(header.get("partitions", 0)))
    partitions |= {e.payload["partition"] for e in _events(trace, "COMMIT", "MTX_APPLY")}
    for pid in sorted(partitions):
        violation = check_serializability(trace, pid)
        if violation is not None:
            return violation
    return None


CHECKERS: Dict[str, Callable[[List[TraceEvent]], Optional[Violation]]] = {
    "serializability": _serializability_all,
    "durability": check_durability,
    "single_ownership": check_single_ownership,
    "mtx_atomicity": check_mtx_atomicity,
    "elasticity": check_elasticity,
    "strict_2pl": check_strict_2pl,
}


def run_checks(trace: List[TraceEvent], names: Optional[List[str]] = None) -> List[Violation]:
    """Run the named checkers (all by default); one Violation at most per checker"""
    names = names or sorted(CHECKERS)
    unknown = [n for n in names if n not in CHECKERS]
    if unknown:
        raise KeyError(f"unknown checkers {unknown}, known: {sorted(CHECKERS)}")
    violations = []
    for name in names:
        violation = CHECKERS[name](trace)
        if violation is not None:
            logger.info(f"{name}: {violation.explanation}")
            violations.append(violation)
    return violations
