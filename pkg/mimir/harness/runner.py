# ---------------------------------------------------
# Runner
# /harness/runner.py
# ---------------------------------------------------
"""Builds one simulated cluster from a Scenario and runs it to the end."""
import logging
from typing import List, Optional, Tuple

from ..config import settings
from ..models import MASTER_ID, METADATA_ID, NodeId, Role
from ..services.htm import HigherTransactionManager
from ..services.kernel import Kernel, TraceEvent, TraceKind
from ..services.master import Master
from ..services.metadata import MetadataManager
from ..services.otm import OwningTransactionManager
from ..services.wal import LogKind, LogRecord
from .client import Client, LoadBalancer
from .metrics import Metrics, PrometheusExporter, compute_metrics
from .scenario import FaultAction, Scenario, ScenarioError
from .workload import gen_workload

logger = logging.getLogger(__name__)

# trace name for events the harness itself records
HARNESS = "harness"


class FaultInjector:
    """Applies the scenario's fault schedule, by time or by trace event"""

    def __init__(self, cluster: "Cluster", faults: List[FaultAction]):
        self.cluster = cluster
        self.kernel = cluster.kernel
        self.timed = [f for f in faults if f.at is not None]
        self.triggered = [(f, 0) for f in faults if f.after is not None]

    def schedule(self) -> None:
        for fault in self.timed:
            self.kernel.call_at(fault.at, lambda fault=fault: self.apply(fault))

    def matches(self, fault: FaultAction, event: TraceEvent) -> bool:
        trigger = fault.after
        return (
            (trigger.kind is None or trigger.kind == event.kind)
            and (trigger.event is None or trigger.event == event.event)
            and (trigger.node is None or trigger.node == event.node)
        )

    def observe(self, event: TraceEvent) -> None:
        if not self.triggered or event.event == "FAULT":
            return
        due = []
        pending = []
        for fault, seen in self.triggered:
            if self.matches(fault, event):
                seen += 1
                if seen == fault.after.nth:
                    due.append(fault)
                    continue
            pending.append((fault, seen))
        self.triggered = pending
        for fault in due:
            self.apply(fault)

    def apply(self, fault: FaultAction) -> None:
        logger.info(f"t={self.kernel.now} fault {fault.action} {fault.node or fault.volume or fault.groups}")
        self.kernel.record(
            HARNESS,
            TraceKind.LOCAL,
            {
                "event": "FAULT",
                "action": fault.action,
                "node": fault.node,
                "volume": fault.volume,
                "groups": fault.groups,
            },
        )
        kernel = self.kernel
        if fault.action == "crash":
            kernel.crash_node(NodeId.parse(fault.node))
        elif fault.action == "restart":
            kernel.restart_node(NodeId.parse(fault.node))
        elif fault.action == "partition":
            kernel.network = kernel.network.model_copy(update={"partition_sets": fault.groups})
        elif fault.action == "heal":
            kernel.network = kernel.network.model_copy(update={"partition_sets": []})
        elif fault.action == "tear_volume":
            self.tear(fault.volume)
        elif fault.action == "spawn_htm":
            node_id = kernel.spawn(Role.HTM, self.cluster.htm_factory)
            self.cluster.balancer.add(str(node_id))
        elif fault.action == "retire_htm":
            self.cluster.balancer.remove(fault.node)
            kernel.halt_node(NodeId.parse(fault.node))

    def tear(self, volume_id: str) -> None:
        """A partial record at the tail, as left by an owner that died mid-append"""
        volume = self.kernel.volumes.get(volume_id)
        if volume is None or volume.attached_to is not None:
            logger.warning(f"t={self.kernel.now} tear_volume: {volume_id} missing or attached, skipped")
            return
        record = LogRecord(LogKind.COMMIT, "torn", volume.max_epoch).encode()
        volume.records.append(record[: len(record) // 2])


class Cluster:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.config = scenario.runtime()
        self.kernel = Kernel(
            network=scenario.network,
            seed=scenario.seed,
            clock_skew=scenario.clock_skew,
            retry_base=settings.RETRY_BASE,
            retry_cap=settings.RETRY_CAP,
        )
        self.balancer = LoadBalancer()
        self.exporter = PrometheusExporter()
        self.injector = FaultInjector(self, scenario.faults)
        self.kernel.subscribe(self.exporter.observe)
        self.kernel.subscribe(self.injector.observe)

    def otm_factory(self, kernel: Kernel, node_id: NodeId) -> OwningTransactionManager:
        return OwningTransactionManager(kernel, node_id, self.config)

    def htm_factory(self, kernel: Kernel, node_id: NodeId) -> HigherTransactionManager:
        return HigherTransactionManager(kernel, node_id, self.config)

    def build(self) -> "Cluster":
        s = self.scenario
        for fault in s.faults:
            if fault.node is not None:
                try:
                    NodeId.parse(fault.node)
                except ValueError as e:
                    raise ScenarioError(f"fault on {fault.node}: {e}") from e
        self.kernel.record(HARNESS, TraceKind.LOCAL, {"event": "SCENARIO", **s.header()})

        ranges = s.key_ranges()
        self.kernel.add_node(METADATA_ID, lambda k, n: MetadataManager(k, n, ranges, self.config))
        initial = [NodeId(Role.OTM, i) for i in range(s.otms)]
        self.kernel.add_node(
            MASTER_ID, lambda k, n: Master(k, n, self.config, self.otm_factory, [str(o) for o in initial])
        )
        for otm in initial:
            self.kernel.add_node(otm, self.otm_factory)
        for i in range(s.htms):
            htm = NodeId(Role.HTM, i)
            self.kernel.add_node(htm, self.htm_factory)
            self.balancer.add(str(htm))

        bounds = s.partition_bounds()
        spec = s.workload
        for i in range(spec.clients):
            ops = gen_workload(spec, s.seed, i, s.key_space, bounds)
            self.kernel.add_node(
                NodeId(Role.CLIENT, i),
                lambda k, n, ops=ops, i=i: Client(k, n, self.config, ops, self.balancer, spec, spec.ops_for(i)),
            )
        self.injector.schedule()
        return self

    def run(self, until: Optional[int] = None) -> List[TraceEvent]:
        until = self.scenario.duration if until is None else until
        logger.info(f"{self.scenario.name}: running seed={self.scenario.seed} until t={until}")
        self.kernel.run_until(until)
        self.audit()
        return self.kernel.trace

    def audit(self) -> None:
        for node_id in self.kernel.nodes(Role.OTM):
            node = self.kernel.node(node_id)
            if node is not None:
                node.audit()


def run_scenario(scenario: Scenario, until: Optional[int] = None) -> Tuple[List[TraceEvent], Metrics]:
    cluster = Cluster(scenario).build()
    trace = cluster.run(until)
    return trace, compute_metrics(trace, scenario.stats_window)
