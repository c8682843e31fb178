# ---------------------------------------------------
# Metrics
# /harness/metrics.py
# ---------------------------------------------------
"""Run metrics, recomputed from the trace alone, plus a prometheus view
of the same run fed live from the kernel's trace listener."""
import logging
from typing import Dict, List, Tuple

import numpy as np
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, generate_latest
from pydantic import BaseModel, Field

from ..services.kernel import TraceEvent, TraceKind

logger = logging.getLogger(__name__)

LATENCY_BUCKETS = (5, 10, 20, 40, 80, 160, 320, 640, 1280, 2560)


class WindowCounts(BaseModel):
    window: int
    committed: int = 0
    aborted: int = 0
    rejected: int = 0
    timeouts: int = 0


class Metrics(BaseModel):
    committed: int = 0
    aborted: int = 0
    rejected: int = 0
    timeouts: int = 0
    mtx_outcomes: Dict[str, int] = Field(default_factory=dict)
    read_only_outcomes: Dict[str, int] = Field(default_factory=dict)
    latency_p50: float = 0.0
    latency_p99: float = 0.0
    windows: List[WindowCounts] = Field(default_factory=list)
    live_otms: List[Tuple[int, int]] = Field(default_factory=list)
    migrations: int = 0
    migration_aborts: int = 0
    spawns: int = 0
    retires: int = 0
    recovery_latencies: List[int] = Field(default_factory=list)


def _is_otm(node: str) -> bool:
    return node.startswith("otm")


def compute_metrics(trace: List[TraceEvent], stats_window: int) -> Metrics:
    metrics = Metrics()
    windows: Dict[int, WindowCounts] = {}
    latencies: List[int] = []
    live: set = set()
    recovering: Dict[str, int] = {}

    def otm_count(time: int) -> None:
        if not metrics.live_otms or metrics.live_otms[-1][1] != len(live):
            metrics.live_otms.append((time, len(live)))

    for event in trace:
        if event.kind == TraceKind.CRASH and _is_otm(event.node):
            live.discard(event.node)
            otm_count(event.time)
            continue
        if event.kind != TraceKind.LOCAL:
            continue
        name, p = event.event, event.payload
        if name == "TXN_DONE":
            counts = windows.setdefault(event.time // stats_window, WindowCounts(window=event.time // stats_window))
            outcome = p["outcome"]
            if outcome == "COMMITTED":
                metrics.committed += 1
                counts.committed += 1
                latencies.append(p["latency"])
            elif outcome == "ABORTED":
                metrics.aborted += 1
                counts.aborted += 1
            elif outcome == "REJECTED":
                metrics.rejected += 1
                counts.rejected += 1
            else:
                metrics.timeouts += 1
                counts.timeouts += 1
        elif name == "MTX_DONE":
            metrics.mtx_outcomes[p["outcome"]] = metrics.mtx_outcomes.get(p["outcome"], 0) + 1
        elif name == "RO_DONE":
            metrics.read_only_outcomes[p["outcome"]] = metrics.read_only_outcomes.get(p["outcome"], 0) + 1
        elif name == "LEASE_ACQUIRED" and _is_otm(event.node):
            live.add(event.node)
            otm_count(event.time)
        elif name in ("HALTED", "RETIRED", "LEASE_LOST") and _is_otm(event.node):
            live.discard(event.node)
            otm_count(event.time)
        elif name == "MIGRATE_PHASE4":
            metrics.migrations += 1
        elif name == "MIGRATE_ABORT":
            metrics.migration_aborts += 1
        elif name == "SPAWN":
            metrics.spawns += 1
        elif name == "RETIRE":
            metrics.retires += 1
        elif name == "RECOVER_START":
            recovering.setdefault(p["otm"], event.time)
        elif name == "RECOVER_DONE" and p["otm"] in recovering:
            metrics.recovery_latencies.append(event.time - recovering.pop(p["otm"]))

    if latencies:
        metrics.latency_p50 = float(np.percentile(latencies, 50))
        metrics.latency_p99 = float(np.percentile(latencies, 99))
    metrics.windows = [windows[w] for w in sorted(windows)]
    return metrics


class PrometheusExporter:
    """Per-run registry, so that runs in one process never share counters"""

    def __init__(self):
        self.registry = CollectorRegistry()
        self.commits = Counter("mimir_commits_total", "Committed single-partition transactions", registry=self.registry)
        self.aborts = Counter("mimir_aborts_total", "Aborted or timed-out transactions", registry=self.registry)
        self.rejections = Counter(
            "mimir_rejections_total", "Requests refused by an OTM serve guard", registry=self.registry
        )
        self.migrations = Counter("mimir_migrations_total", "Completed partition migrations", registry=self.registry)
        self.recoveries = Counter(
            "mimir_recoveries_total", "Partitions recovered after a failure", registry=self.registry
        )
        self.mtx = Counter("mimir_mtx_total", "Minitransaction outcomes", ["outcome"], registry=self.registry)
        self.live_otms = Gauge("mimir_live_otms", "OTMs holding a lease", registry=self.registry)
        self.latency = Histogram(
            "mimir_commit_latency_ticks",
            "Client-observed commit latency in simulated ticks",
            buckets=LATENCY_BUCKETS,
            registry=self.registry,
        )
        self._live: set = set()

    def observe(self, event: TraceEvent) -> None:
        if event.kind == TraceKind.CRASH and _is_otm(event.node):
            self._live.discard(event.node)
            self.live_otms.set(len(self._live))
            return
        if event.kind != TraceKind.LOCAL:
            return
        name, p = event.event, event.payload
        if name == "TXN_DONE":
            if p["outcome"] == "COMMITTED":
                self.commits.inc()
                self.latency.observe(p["latency"])
            else:
                self.aborts.inc()
        elif name == "REJECT":
            self.rejections.inc()
        elif name == "MIGRATE_PHASE4":
            self.migrations.inc()
        elif name == "RECOVER_END":
            self.recoveries.inc()
        elif name == "MTX_DONE":
            self.mtx.labels(outcome=p["outcome"]).inc()
        elif name == "LEASE_ACQUIRED" and _is_otm(event.node):
            self._live.add(event.node)
            self.live_otms.set(len(self._live))
        elif name in ("HALTED", "RETIRED", "LEASE_LOST") and _is_otm(event.node):
            self._live.discard(event.node)
            self.live_otms.set(len(self._live))

    def export(self) -> bytes:
        return generate_latest(self.registry)
