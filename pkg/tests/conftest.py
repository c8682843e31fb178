from typing import Any, Dict, List, Optional

import pytest

from mimir.harness.runner import Cluster
from mimir.harness.scenario import Scenario
from mimir.messages import Message, MtxSubmit, OpenPartition, OpenReply, ReadOnly
from mimir.models import MASTER_ID, METADATA_ID, KeyRange, NodeId, Role, RuntimeConfig
from mimir.services.htm import HigherTransactionManager
from mimir.services.kernel import Kernel, Node, TraceEvent, TraceKind
from mimir.services.master import Master
from mimir.services.metadata import MetadataManager
from mimir.services.otm import OwningTransactionManager


class Probe(Node):
    """Stands in for a client or the master: sends raw messages, keeps every reply"""

    role = Role.CLIENT

    def __init__(self, kernel: Kernel, node_id: NodeId):
        super().__init__(kernel, node_id)
        self.inbox: List[Any] = []

    def receive(self, src: NodeId, msg) -> None:
        self.inbox.append(msg)

    def ask(self, dst: NodeId, msg: Message, req_id: str, wait: int = 50):
        msg.req_id = req_id
        self.send(dst, msg)
        self.kernel.run_until(self.kernel.now + wait)
        replies = [m for m in self.inbox if getattr(m, "req_id", None) == req_id]
        return replies[-1] if replies else None


def local(trace: List[TraceEvent], name: str, **match) -> List[TraceEvent]:
    return [
        e
        for e in trace
        if e.kind == TraceKind.LOCAL and e.event == name and all(e.payload.get(k) == v for k, v in match.items())
    ]


@pytest.fixture
def config() -> RuntimeConfig:
    return RuntimeConfig(rpc_timeout=25, mtx_timeout=40, client_deadline=80)


@pytest.fixture
def kernel() -> Kernel:
    return Kernel(seed=0)


class OtmBench:
    """One metadata node, OTMs, and probes for the master and a client"""

    def __init__(self, config: RuntimeConfig, ranges: Optional[Dict[int, KeyRange]] = None, otms: int = 1):
        self.config = config
        self.kernel = Kernel(seed=1)
        self.ranges = ranges or {0: KeyRange(lo="")}
        self.kernel.add_node(METADATA_ID, lambda k, n: MetadataManager(k, n, self.ranges, config))
        self.kernel.add_node(MASTER_ID, Probe)
        self.otm_ids = [NodeId(Role.OTM, i) for i in range(otms)]
        for otm in self.otm_ids:
            self.kernel.add_node(otm, lambda k, n: OwningTransactionManager(k, n, config))
        self.client_id = NodeId(Role.CLIENT, 0)
        self.kernel.add_node(self.client_id, Probe)
        self.kernel.run_until(50)
        self._ids = 0

    @property
    def master(self) -> Probe:
        return self.kernel.node(MASTER_ID)

    @property
    def client(self) -> Probe:
        return self.kernel.node(self.client_id)

    def otm(self, index: int = 0) -> OwningTransactionManager:
        return self.kernel.node(self.otm_ids[index])

    def next_id(self) -> str:
        self._ids += 1
        return f"r{self._ids}"

    def open(self, partition: int, epoch: int, index: int = 0) -> OpenReply:
        msg = OpenPartition(
            partition=partition, epoch=epoch, volume=f"vol-p{partition}", key_range=self.ranges[partition]
        )
        return self.master.ask(self.otm_ids[index], msg, self.next_id())

    def request(self, msg: Message, index: int = 0, wait: int = 50):
        return self.client.ask(self.otm_ids[index], msg, self.next_id(), wait)


@pytest.fixture
def bench(config) -> OtmBench:
    return OtmBench(config)


class ClusterBench:
    """A running cluster without workload clients, plus one probe client"""

    def __init__(self, **overrides):
        fields = dict(
            name="bench",
            seed=5,
            key_space=60,
            partitions=2,
            otms=2,
            htms=1,
            elastic=False,
            lease_duration=2_000,
            safety_margin=200,
            duration=100_000,
        )
        fields.update(overrides)
        self.scenario = Scenario(**fields)
        self.cluster = Cluster(self.scenario).build()
        self.kernel = self.cluster.kernel
        self.probe_id = NodeId(Role.CLIENT, 99)
        self.kernel.add_node(self.probe_id, Probe)
        self.kernel.run_until(1_000)
        for htm in self.kernel.nodes(Role.HTM):
            self.kernel.node(htm).refresh()
        self.kernel.run_until(1_100)
        self._ids = 0

    @property
    def master(self) -> Master:
        return self.kernel.node(MASTER_ID)

    @property
    def probe(self) -> Probe:
        return self.kernel.node(self.probe_id)

    def htm(self, index: int = 0) -> HigherTransactionManager:
        return self.kernel.node(NodeId(Role.HTM, index))

    def owner(self, partition: int) -> str:
        return self.master.map[partition].owner

    def ask(self, msg: Message, dst: Optional[NodeId] = None, wait: int = 300):
        self._ids += 1
        return self.probe.ask(dst or NodeId(Role.HTM, 0), msg, f"b{self._ids}", wait)

    def mtx(self, mtx_id: str, writes: Dict[str, str], compares: Optional[Dict[str, Optional[str]]] = None):
        msg = MtxSubmit(mtx_id=mtx_id, writes=writes, compares=compares or {}, deadline=self.kernel.now + 500)
        return self.ask(msg)

    def read(self, *keys: str) -> Dict[str, Optional[str]]:
        reply = self.ask(ReadOnly(keys=list(keys), deadline=self.kernel.now + 500))
        assert reply.status == "OK"
        return reply.values

    def run_for(self, ticks: int) -> None:
        self.kernel.run_until(self.kernel.now + ticks)


@pytest.fixture
def cluster() -> ClusterBench:
    return ClusterBench()
