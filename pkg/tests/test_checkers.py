from typing import List

import pytest

from mimir.harness.checkers import (
    check_durability,
    check_elasticity,
    check_mtx_atomicity,
    check_serializability,
    check_single_ownership,
    check_strict_2pl,
    run_checks,
)
from mimir.services.kernel import TraceEvent, TraceKind


class History:
    """Hand-built trace of LOCAL events"""

    def __init__(self):
        self.trace: List[TraceEvent] = []

    def add(self, node: str, event: str, time: int = None, kind: TraceKind = TraceKind.LOCAL, **payload) -> int:
        seq = len(self.trace)
        if time is None:
            time = self.trace[-1].time if self.trace else 0
        if kind == TraceKind.LOCAL:
            payload["event"] = event
        self.trace.append(TraceEvent(seq, time, node, kind, payload))
        return seq

    def read(self, txn, key, value, partition=0):
        return self.add("otm0", "TXN_READ", partition=partition, txn=txn, key=key, value=value)

    def write(self, txn, key, partition=0):
        return self.add("otm0", "TXN_WRITE", partition=partition, txn=txn, key=key)

    def commit(self, txn, reads=None, writes=None, partition=0):
        return self.add("otm0", "COMMIT", partition=partition, txn=txn, reads=reads or {}, writes=writes or {})


# ---------------------------------------------------
# Serializability
# ---------------------------------------------------
def test_write_skew_cycle_cites_the_four_ordering_events():
    h = History()
    r1 = h.read("t1", "x", None)
    r2 = h.read("t2", "y", None)
    w1 = h.write("t1", "y")
    w2 = h.write("t2", "x")
    h.commit("t1", reads={"x": None}, writes={"y": "1"})
    h.commit("t2", reads={"y": None}, writes={"x": "2"})
    violation = check_serializability(h.trace, 0)
    assert violation is not None and "cycle" in violation.explanation
    assert violation.seqs == sorted([r1, r2, w1, w2])


def test_serial_history_passes():
    h = History()
    h.write("t1", "x")
    h.commit("t1", writes={"x": "a"})
    h.read("t2", "x", "a")
    h.write("t2", "x")
    h.commit("t2", reads={"x": "a"}, writes={"x": "b"})
    assert check_serializability(h.trace, 0) is None


def test_read_of_a_value_nobody_committed_is_flagged():
    h = History()
    seq = h.read("t1", "x", "ghost")
    h.commit("t1", reads={"x": "ghost"})
    violation = check_serializability(h.trace, 0)
    assert violation.seqs == [seq]


def test_micro_history_without_serial_explanation_is_flagged():
    h = History()
    h.commit("t1", writes={"x": "a"})
    h.add("otm0", "AUDIT", partition=0, state={"x": "z"})
    violation = check_serializability(h.trace, 0)
    assert violation is not None and "no serial order" in violation.explanation


def test_other_partitions_are_ignored():
    h = History()
    h.read("t1", "x", "ghost", partition=1)
    h.commit("t1", reads={"x": "ghost"}, partition=1)
    assert check_serializability(h.trace, 0) is None


# ---------------------------------------------------
# Durability
# ---------------------------------------------------
def test_read_after_commit_must_see_the_committed_value():
    h = History()
    commit = h.commit("t1", writes={"x": "a"})
    read = h.add("otm1", "RO_READ", partition=0, key="x", value=None)
    violation = check_durability(h.trace)
    assert violation.checker == "durability" and violation.seqs == [commit, read]


def test_reads_of_committed_values_pass():
    h = History()
    h.commit("t1", writes={"x": "a"})
    h.add("otm1", "RO_READ", partition=0, key="x", value="a")
    h.add("otm1", "AUDIT", partition=0, state={"x": "a"})
    assert check_durability(h.trace) is None


def test_audit_missing_a_committed_key_is_flagged():
    h = History()
    h.commit("t1", writes={"x": "a"})
    h.add("otm1", "AUDIT", partition=0, state={})
    assert check_durability(h.trace) is not None


# ---------------------------------------------------
# Single ownership
# ---------------------------------------------------
def test_overlapping_serving_intervals_are_flagged():
    h = History()
    h.add("otm0", "OPENED", partition=0, epoch=1)
    h.add("otm1", "OPENED", partition=0, epoch=2)
    h.add("otm0", "ADMIT", partition=0, epoch=1)
    violation = check_single_ownership(h.trace)
    assert violation is not None and "same time" in violation.explanation


def test_clean_handoff_passes():
    h = History()
    h.add("otm0", "OPENED", partition=0, epoch=1)
    h.add("otm0", "ADMIT", partition=0, epoch=1)
    h.add("otm1", "OPENED", partition=0, epoch=2)
    h.add("otm1", "ADMIT", partition=0, epoch=2)
    assert check_single_ownership(h.trace) is None


def test_append_below_the_attached_epoch_is_flagged():
    h = History()
    h.add("otm1", "ATTACH", volume="vol-p0", epoch=2)
    seq = h.add("otm0", "", kind=TraceKind.VOLUME_APPEND, volume="vol-p0", lsn=0, epoch=1, size=10)
    assert check_single_ownership(h.trace).seqs == [seq]


# ---------------------------------------------------
# Minitransaction atomicity
# ---------------------------------------------------
def vote(h, mtx, partition, answer="YES", compares=None):
    return h.add(f"otm{partition}", "MTX_VOTE", mtx=mtx, partition=partition, vote=answer, compares=compares or {})


def test_all_yes_committed_and_applied_everywhere_passes():
    h = History()
    vote(h, "m1", 0)
    vote(h, "m1", 1)
    h.add("htm0", "MTX_DECIDE", mtx="m1", decision="COMMIT")
    for pid in (0, 1):
        h.add(f"otm{pid}", "MTX_DECISION", mtx="m1", partition=pid, decision="COMMIT")
        h.add(f"otm{pid}", "MTX_APPLY", mtx="m1", partition=pid, writes={})
    assert check_mtx_atomicity(h.trace) is None


def test_conflicting_decisions_are_flagged():
    h = History()
    first = h.add("htm0", "MTX_DECIDE", mtx="m1", decision="COMMIT")
    second = h.add("master0", "MTX_RESOLVE", mtx="m1", decision="ABORT", participants=[0])
    assert check_mtx_atomicity(h.trace).seqs == [first, second]


def test_apply_before_decision_is_flagged():
    h = History()
    vote(h, "m1", 0)
    seq = h.add("otm0", "MTX_APPLY", mtx="m1", partition=0, writes={"x": "v"})
    assert check_mtx_atomicity(h.trace).seqs == [seq]


def test_committed_but_never_applied_is_flagged():
    h = History()
    vote(h, "m1", 0)
    h.add("htm0", "MTX_DECIDE", mtx="m1", decision="COMMIT", time=10)
    violation = check_mtx_atomicity(h.trace)
    assert violation is not None and "never applied" in violation.explanation


def test_yes_vote_with_failing_compare_is_flagged():
    h = History()
    vote(h, "m1", 0, compares={"x": ["5", "3"]})
    assert "failing compares" in check_mtx_atomicity(h.trace).explanation


# ---------------------------------------------------
# Elasticity and strict 2PL
# ---------------------------------------------------
def elastic_history(reaction: bool) -> History:
    h = History()
    h.add("harness", "SCENARIO", elastic=True, stats_window=100, t_high=10, t_low=1, min_otms=1)
    h.add("master0", "PLAN", time=100, per_otm={"otm0": 50}, saturated=[])
    if reaction:
        h.add("master0", "SPAWN", time=200, otm="otm1")
    h.add("otm0", "TICK", time=1_000)
    return h


def test_overload_without_reaction_is_flagged():
    assert check_elasticity(elastic_history(False).trace).checker == "elasticity"
    assert check_elasticity(elastic_history(True).trace) is None


def test_overload_counts_skipped_planner_ticks():
    h = History()
    h.add("harness", "SCENARIO", elastic=True, stats_window=100, t_high=10, t_low=1, min_otms=1)
    h.add("master0", "PLAN", time=100, per_otm={"otm0": 50}, saturated=[])
    h.add("master0", "SPAWN", time=150, otm="otm1")
    for window in range(2, 7):
        h.add("master0", "PLAN_SKIPPED", time=window * 100, window=window, per_otm={"otm0": 50}, saturated=[])
    h.add("otm0", "TICK", time=2_000)
    violation = check_elasticity(h.trace)
    assert violation is not None and "more than 5 windows" in violation.explanation
    assert len(violation.seqs) == 6


def test_skipped_tick_without_loads_leaves_the_streak_alone():
    h = History()
    h.add("harness", "SCENARIO", elastic=True, stats_window=100, t_high=10, t_low=1, min_otms=1)
    h.add("master0", "PLAN", time=100, per_otm={"otm0": 50}, saturated=[])
    h.add("master0", "SPAWN", time=150, otm="otm1")
    h.add("master0", "PLAN_SKIPPED", time=200, window=2)
    h.add("otm0", "TICK", time=2_000)
    assert check_elasticity(h.trace) is None


def test_locks_released_before_commit_are_flagged():
    h = History()
    h.write("t1", "x")
    h.add("otm0", "LOCKS_RELEASED", partition=0, txn="t1", keys=["x"])
    h.commit("t1", writes={"x": "a"})
    assert check_strict_2pl(h.trace) is not None


def test_locks_released_after_commit_pass():
    h = History()
    h.write("t1", "x")
    h.commit("t1", writes={"x": "a"})
    h.add("otm0", "LOCKS_RELEASED", partition=0, txn="t1", keys=["x"])
    assert check_strict_2pl(h.trace) is None


def test_run_checks_rejects_unknown_names_and_passes_empty_trace():
    with pytest.raises(KeyError):
        run_checks([], ["nope"])
    assert run_checks([]) == []
