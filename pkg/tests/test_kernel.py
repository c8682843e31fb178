import pytest
from pydantic import ValidationError

from mimir.messages import Message
from mimir.models import NodeId, Role
from mimir.services.kernel import (
    ConfigurationError,
    FencingError,
    Kernel,
    NetworkConfig,
    Node,
    SimulationAborted,
    TraceKind,
    dump_trace,
    load_trace,
)


class Ping(Message):
    n: int = 0


class Recorder(Node):
    role = Role.OTM

    def __init__(self, kernel, node_id):
        super().__init__(kernel, node_id)
        self.seen = []

    def on_ping(self, src, msg: Ping) -> None:
        self.seen.append((self.now, msg.n))


A = NodeId(Role.OTM, 0)
B = NodeId(Role.OTM, 1)


def pair(kernel: Kernel):
    kernel.add_node(A, Recorder)
    kernel.add_node(B, Recorder)
    kernel.run_until(0)
    return kernel.node(A), kernel.node(B)


def test_schedule_runs_at_now_plus_delay(kernel):
    a, _ = pair(kernel)
    kernel.run_until(5)
    fired = []
    kernel.schedule(A, 10, lambda: fired.append(kernel.now))
    kernel.schedule(A, 0, lambda: fired.append(kernel.now))
    kernel.run_until(100)
    assert fired == [5, 15]


def test_zero_delay_timer_runs_after_already_queued_events(kernel):
    pair(kernel)
    order = []
    kernel.schedule(A, 0, lambda: order.append("first"))
    kernel.schedule(A, 0, lambda: (order.append("second"), kernel.schedule(A, 0, lambda: order.append("third"))))
    kernel.schedule(B, 0, lambda: order.append("other"))
    kernel.run_until(0)
    assert order == ["first", "second", "other", "third"]


def test_timer_of_a_crashed_node_never_runs(kernel):
    pair(kernel)
    fired = []
    kernel.schedule(A, 10, lambda: fired.append(1))
    kernel.crash_node(A)
    kernel.restart_node(A)
    kernel.run_until(100)
    assert fired == []


def test_unknown_node_is_a_configuration_error(kernel):
    with pytest.raises(ConfigurationError):
        kernel.schedule(NodeId(Role.HTM, 9), 0, None)
    pair(kernel)
    with pytest.raises(ConfigurationError):
        kernel.add_node(A, Recorder)


def test_lossless_send_is_delivered_exactly_once(kernel):
    a, b = pair(kernel)
    a.send(B, Ping(n=1))
    kernel.run_until(100)
    assert [n for _, n in b.seen] == [1]
    sends = [e for e in kernel.trace if e.kind == TraceKind.SEND]
    delivers = [e for e in kernel.trace if e.kind == TraceKind.DELIVER]
    assert len(sends) == len(delivers) == 1
    assert delivers[0].time >= sends[0].time + kernel.network.min_delay


def test_drop_probability_one_drops_everything():
    kernel = Kernel(network=NetworkConfig(drop_probability=1.0))
    a, b = pair(kernel)
    a.send(B, Ping(n=1))
    kernel.run_until(100)
    assert b.seen == []
    assert [e.payload["reason"] for e in kernel.trace if e.kind == TraceKind.DROP] == ["lost"]


def test_partition_sets_block_only_across_groups():
    c = NodeId(Role.HTM, 0)
    kernel = Kernel(network=NetworkConfig(partition_sets=[["otm0"], ["otm1"]]))
    a, b = pair(kernel)
    kernel.add_node(c, Recorder)
    a.send(B, Ping(n=1))
    a.send(c, Ping(n=2))
    kernel.run_until(100)
    assert b.seen == [] and [n for _, n in kernel.node(c).seen] == [2]


def test_network_config_rejects_overlapping_sets_and_inverted_delays():
    with pytest.raises(ValidationError):
        NetworkConfig(partition_sets=[["otm0", "otm1"], ["otm1"]])
    with pytest.raises(ValidationError):
        NetworkConfig(min_delay=5, max_delay=1)


def test_crash_twice_is_a_traced_noop(kernel):
    pair(kernel)
    kernel.crash_node(A)
    kernel.crash_node(A)
    assert [e.kind for e in kernel.trace if e.node == "otm0"][-2:] == [TraceKind.CRASH, TraceKind.LOCAL]
    assert kernel.trace[-1].event == "CRASH_NOOP"


def test_halting_a_crashed_node_keeps_it_down(kernel):
    pair(kernel)
    kernel.crash_node(A)
    kernel.halt_node(A)
    kernel.restart_node(A)
    kernel.run_until(100)
    assert not kernel.is_alive(A)
    assert not [e for e in kernel.trace if e.node == "otm0" and e.kind == TraceKind.RESTART]


def test_no_event_is_attributed_to_a_crashed_node(kernel):
    a, _ = pair(kernel)
    kernel.node(B).send(A, Ping(n=1))
    kernel.crash_node(A)
    kernel.run_until(100)
    crash = next(e.seq for e in kernel.trace if e.kind == TraceKind.CRASH)
    assert not [e for e in kernel.trace if e.node == "otm0" and e.seq > crash]


def test_volume_append_assigns_lsns_and_survives_crash(kernel):
    pair(kernel)
    kernel.attach_volume("v", A, epoch=1)
    assert kernel.volume_append("v", A, b"one", 1) == 0
    assert kernel.volume_append("v", A, b"two", 1) == 1
    kernel.crash_node(A)
    kernel.restart_node(A)
    kernel.attach_volume("v", A, epoch=2)
    assert kernel.volume_read("v", A) == [b"one", b"two"]


def test_volume_fences_non_attached_and_stale_writers(kernel):
    pair(kernel)
    kernel.attach_volume("v", A, epoch=1)
    with pytest.raises(FencingError):
        kernel.volume_append("v", B, b"x", 1)
    with pytest.raises(FencingError):
        kernel.attach_volume("v", B, epoch=1)
    kernel.attach_volume("v", B, epoch=2)
    with pytest.raises(FencingError):
        kernel.volume_append("v", A, b"stale", 1)
    assert kernel.volume_append("v", B, b"fresh", 2) == 0


def test_run_until_quiescence_terminates(kernel):
    a, b = pair(kernel)
    a.send(B, Ping(n=1))
    trace = kernel.run_until()
    assert trace[-1].kind == TraceKind.DELIVER


def test_handler_failure_aborts_with_the_trace():
    class Broken(Recorder):
        def on_ping(self, src, msg):
            raise RuntimeError("boom")

    kernel = Kernel()
    kernel.add_node(A, Recorder)
    kernel.add_node(B, Broken)
    kernel.node(A).send(B, Ping())
    with pytest.raises(SimulationAborted) as info:
        kernel.run_until(100)
    assert info.value.trace[-1].kind == TraceKind.DELIVER


def _chatter(seed: int) -> str:
    kernel = Kernel(network=NetworkConfig(min_delay=1, max_delay=20, drop_probability=0.2), seed=seed)
    a, b = pair(kernel)
    for n in range(50):
        (a if n % 2 else b).send(B if n % 2 else A, Ping(n=n))
    kernel.run_until(1000)
    return dump_trace(kernel.trace)


def test_same_seed_gives_byte_identical_trace():
    assert _chatter(4) == _chatter(4)
    assert _chatter(4) != _chatter(5)


def test_trace_lines_keep_field_order_and_load_back():
    text = _chatter(1)
    first = text.splitlines()[0]
    assert first.startswith('{"seq":0,"time":')
    assert first.index('"node"') < first.index('"kind"') < first.index('"payload"')
    assert dump_trace(load_trace(text)) == text


def test_messages_between_a_pair_may_reorder():
    kernel = Kernel(network=NetworkConfig(min_delay=1, max_delay=50), seed=2)
    a, b = pair(kernel)
    for n in range(20):
        a.send(B, Ping(n=n))
    kernel.run_until(1000)
    received = [n for _, n in b.seen]
    assert sorted(received) == list(range(20)) and received != list(range(20))
