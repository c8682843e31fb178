from conftest import ClusterBench, local

from mimir.messages import MtxSubmit, ReadOnly, TxnOpen
from mimir.models import NodeId, PartitionMap, Role
from mimir.services.kernel import TraceKind
from mimir.services.planner import Move


def test_route_uses_the_cached_partition_map(cluster):
    owner, epoch, pid = cluster.htm().route(key="k000040")
    assert pid == 1 and owner == cluster.owner(1) and epoch > 0


def test_split_groups_keys_by_partition(cluster):
    msg = MtxSubmit(
        mtx_id="m1",
        compares={"k000002": "x"},
        reads=["k000041", "k000041"],
        writes={"k000001": "a", "k000040": "b"},
        deadline=0,
    )
    fragments = cluster.htm().split(msg)
    assert sorted(fragments) == [0, 1]
    assert fragments[0] == {"compares": {"k000002": "x"}, "reads": [], "writes": {"k000001": "a"}}
    assert fragments[1] == {"compares": {}, "reads": ["k000041"], "writes": {"k000040": "b"}}


def test_txn_open_begins_at_the_owner(cluster):
    reply = cluster.ask(TxnOpen(key="k000003", deadline=cluster.kernel.now + 500))
    assert reply.status == "OK" and reply.partition == 0
    assert reply.owner == cluster.owner(0) and reply.txn_id


def test_read_only_of_no_keys_is_answered_at_once(cluster):
    assert cluster.ask(ReadOnly(keys=[], deadline=cluster.kernel.now + 10)).status == "OK"


def test_cross_partition_mtx_commits_everywhere(cluster):
    reply = cluster.mtx("m1", {"k000001": "a", "k000040": "b"})
    assert reply.outcome == "COMMIT"
    cluster.run_for(100)
    assert cluster.read("k000001", "k000040") == {"k000001": "a", "k000040": "b"}
    trace = cluster.kernel.trace
    assert len(local(trace, "MTX_DECIDE", mtx="m1")) == 1
    assert {e.payload["partition"] for e in local(trace, "MTX_APPLY", mtx="m1")} == {0, 1}


def test_failing_compare_aborts_the_whole_mtx(cluster):
    reply = cluster.mtx("m1", {"k000001": "a", "k000040": "b"}, compares={"k000002": "never"})
    assert reply.outcome == "ABORT" and reply.reads == {}
    cluster.run_for(100)
    assert not local(cluster.kernel.trace, "MTX_APPLY", mtx="m1")
    assert cluster.read("k000001", "k000040") == {"k000001": None, "k000040": None}


def test_compare_sees_the_committed_value(cluster):
    cluster.mtx("m1", {"k000001": "v1"})
    reply = cluster.mtx("m2", {"k000040": "v2"}, compares={"k000001": "v1"})
    assert reply.outcome == "COMMIT"


def test_stale_route_is_redirected_after_migration():
    bench = ClusterBench(route_ttl=100_000)
    bench.mtx("m0", {"k000001": "a"})
    src = bench.owner(0)
    dst = next(o for o in sorted(bench.master.ready) if o != src)
    bench.master.execute_migration(Move(partition=0, src=src, dst=dst))
    bench.run_for(1_000)
    assert bench.owner(0) == dst
    assert bench.read("k000001") == {"k000001": "a"}
    assert local(bench.kernel.trace, "REDIRECT", partition=0)
    assert bench.kernel.node(NodeId(Role.HTM, 0)).route(partition=0)[0] == dst


def sent(trace, src: str, kind: str, mtx_id: str):
    """Partitions that src sent a kind message to for mtx_id"""
    sends = [e for e in trace if e.kind == TraceKind.SEND and e.node == src and e.payload["type"] == kind]
    return [e.payload["body"]["partition"] for e in sends if e.payload["body"]["mtx_id"] == mtx_id]


def test_fault_free_mtx_takes_one_round_per_participant():
    bench = ClusterBench(partitions=3)
    reply = bench.mtx("m1", {"k000001": "a", "k000025": "b", "k000045": "c"})
    assert reply.outcome == "COMMIT"
    bench.run_for(100)
    trace = bench.kernel.trace
    assert sorted(sent(trace, "htm0", "MtxRound", "m1")) == [0, 1, 2]
    assert sorted(sent(trace, "htm0", "MtxDecisionMsg", "m1")) == [0, 1, 2]
    assert "m1" not in bench.htm().rounds


def test_yes_voter_hears_the_abort_even_after_the_decision():
    bench = ClusterBench()
    reply = bench.mtx("m1", {"k000001": "a", "k000040": "b"}, compares={"k000002": "never"})
    assert reply.outcome == "ABORT"
    bench.run_for(200)
    trace = bench.kernel.trace
    votes = {e.payload["partition"]: e.payload["vote"] for e in local(trace, "MTX_VOTE_RECV", mtx="m1")}
    assert votes == {0: "NO", 1: "YES"}
    assert sent(trace, "htm0", "MtxDecisionMsg", "m1") == [1]
    assert local(trace, "MTX_DECISION", mtx="m1", partition=1, decision="ABORT")
    assert not local(trace, "MTX_RESOLVE_REQUEST", mtx="m1")
    assert "m1" not in bench.htm().rounds


def test_unmapped_keys_are_answered_with_an_error(cluster):
    htm = cluster.htm()
    htm.cache = PartitionMap(entries={1: htm.cache.entries[1]})
    assert cluster.ask(ReadOnly(keys=["k000001"], deadline=cluster.kernel.now + 500)).status == "ERROR"
    htm.cache = PartitionMap(entries={1: htm.cache.entries[1]})
    assert cluster.mtx("m1", {"k000001": "a"}).outcome == "ERROR"
    assert not local(cluster.kernel.trace, "MTX_BEGIN", mtx="m1")
