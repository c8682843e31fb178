# ---------------------------------------------------
# Scenario
# /harness/scenario.py
# ---------------------------------------------------
"""Scenario files: JSON documents validated by pydantic.

Unset protocol parameters default from `settings`.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, ValidationError, model_validator

from ..config import settings
from ..models import KeyRange, Mutations, RuntimeConfig
from ..services.kernel import MimirError, NetworkConfig, TraceKind
from ..utils.helpers import format_key

logger = logging.getLogger(__name__)


class ScenarioError(MimirError):
    pass


class Phase(BaseModel):
    at: int = Field(default=0, ge=0)
    rate: float = Field(ge=0)


class WorkloadSpec(BaseModel):
    clients: int = Field(default=0, ge=0)
    mix: Dict[Literal["read_only", "txn", "mtx"], float] = Field(
        default_factory=lambda: {"read_only": 0.2, "txn": 0.7, "mtx": 0.1}
    )
    distribution: Literal["uniform", "zipfian"] = "uniform"
    zipf_s: float = Field(default=1.0, gt=0)
    # operations per stats window, summed over all clients
    rate: float = Field(default=50.0, ge=0)
    phases: List[Phase] = Field(default_factory=list)
    ops_per_txn: int = Field(default=3, ge=1)
    read_fraction: float = Field(default=0.5, ge=0.0, le=1.0)
    mtx_partitions: int = Field(default=2, ge=1)
    compare_probability: float = Field(default=0.3, ge=0.0, le=1.0)
    start: int = Field(default=100, ge=0)
    total_ops: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def check_mix(self):
        if any(w < 0 for w in self.mix.values()):
            raise ValueError("mix weights must be non-negative")
        if self.clients and sum(self.mix.values()) <= 0:
            raise ValueError("mix weights must not all be zero")
        return self

    def rate_at(self, time: int) -> float:
        rate = self.rate
        for phase in sorted(self.phases, key=lambda p: p.at):
            if phase.at <= time:
                rate = phase.rate
        return rate

    def ops_for(self, client_index: int) -> Optional[int]:
        if self.total_ops is None:
            return None
        base, extra = divmod(self.total_ops, max(1, self.clients))
        return base + (1 if client_index < extra else 0)


class Trigger(BaseModel):
    """Fires right after the nth trace event matching every given field"""

    kind: Optional[TraceKind] = None
    event: Optional[str] = None
    node: Optional[str] = None
    nth: int = Field(default=1, ge=1)


class FaultAction(BaseModel):
    at: Optional[int] = Field(default=None, ge=0)
    after: Optional[Trigger] = None
    action: Literal["crash", "restart", "partition", "heal", "tear_volume", "spawn_htm", "retire_htm"]
    node: Optional[str] = None
    groups: List[List[str]] = Field(default_factory=list)
    volume: Optional[str] = None

    @model_validator(mode="after")
    def check_action(self):
        if (self.at is None) == (self.after is None):
            raise ValueError("a fault needs exactly one of 'at' or 'after'")
        if self.action in ("crash", "restart", "retire_htm") and not self.node:
            raise ValueError(f"{self.action} needs a node")
        if self.action == "partition" and not self.groups:
            raise ValueError("partition needs groups")
        if self.action == "tear_volume" and not self.volume:
            raise ValueError("tear_volume needs a volume")
        return self


class SweepSpec(BaseModel):
    """Sub-runs per (event, nth) of the fault template and per seed.

    Seeds run from the scenario's own seed upward; `seeds` counts them.
    """

    action: Optional[FaultAction] = None
    events: List[str] = Field(default_factory=list)
    nths: List[int] = Field(default_factory=lambda: [1])
    extra: List[FaultAction] = Field(default_factory=list)
    seeds: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def check_sweep(self):
        if self.action is None and self.seeds == 1:
            raise ValueError("a sweep needs a fault template or more than one seed")
        return self


class Scenario(BaseModel):
    name: str = "scenario"
    seed: int = Field(default=0, ge=0)
    key_space: int = Field(default=1000, ge=1)
    partitions: int = Field(default=1, ge=1)
    otms: int = Field(default=1, ge=1)
    htms: int = Field(default=1, ge=0)
    network: NetworkConfig = Field(
        default_factory=lambda: NetworkConfig(
            min_delay=settings.MIN_DELAY,
            max_delay=settings.MAX_DELAY,
            drop_probability=settings.DROP_PROBABILITY,
        )
    )
    lease_duration: int = Field(default_factory=lambda: settings.LEASE_DURATION, gt=0)
    safety_margin: int = Field(default_factory=lambda: settings.SAFETY_MARGIN, ge=0)
    renew_fraction: float = Field(default_factory=lambda: settings.RENEW_FRACTION, gt=0, lt=1)
    checkpoint_interval: int = Field(default_factory=lambda: settings.CHECKPOINT_INTERVAL, gt=0)
    checkpoint_commits: int = Field(default_factory=lambda: settings.CHECKPOINT_COMMITS, gt=0)
    txn_idle_timeout: int = Field(default_factory=lambda: settings.TXN_IDLE_TIMEOUT, gt=0)
    vote_retention: int = Field(default_factory=lambda: settings.VOTE_RETENTION, gt=0)
    stats_window: int = Field(default_factory=lambda: settings.STATS_WINDOW, gt=0)
    t_high: int = Field(default_factory=lambda: settings.T_HIGH, gt=0)
    t_low: int = Field(default_factory=lambda: settings.T_LOW, ge=0)
    drain_timeout: int = Field(default_factory=lambda: settings.DRAIN_TIMEOUT, ge=0)
    detect_interval: int = Field(default_factory=lambda: settings.DETECT_INTERVAL, gt=0)
    min_otms: int = Field(default_factory=lambda: settings.MIN_OTMS, ge=1)
    mtx_timeout: Optional[int] = Field(default=None, gt=0)
    client_deadline: Optional[int] = Field(default=None, gt=0)
    route_ttl: int = Field(default=1_000, gt=0)
    clock_skew: Dict[str, int] = Field(default_factory=dict)
    elastic: bool = True
    duration: int = Field(default=60_000, gt=0)
    workload: WorkloadSpec = Field(default_factory=WorkloadSpec)
    faults: List[FaultAction] = Field(default_factory=list)
    sweep: Optional[SweepSpec] = None
    mutations: Mutations = Field(default_factory=Mutations)
    # checkers this scenario is meant to trip (mutation scenarios)
    expect_violations: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_consistency(self):
        if self.partitions > self.key_space:
            raise ValueError("more partitions than keys")
        if self.t_low >= self.t_high:
            raise ValueError("t_low must be below t_high")
        if self.safety_margin >= self.lease_duration:
            raise ValueError("safety_margin must be shorter than lease_duration")
        if self.vote_retention <= 2 * self.lease_duration:
            raise ValueError("vote_retention must outlast two lease periods")
        for node, skew in self.clock_skew.items():
            if abs(skew) >= max(1, self.safety_margin):
                raise ValueError(f"clock skew of {node} must stay inside the safety margin")
        for fault in self.faults:
            if fault.at is not None and fault.at > self.duration:
                raise ValueError(f"fault at {fault.at} is past the duration {self.duration}")
        return self

    # ---------------------------------------------------
    # Derived values
    # ---------------------------------------------------
    def partition_bounds(self) -> List[tuple]:
        """Contiguous, equally sized key-index ranges [lo, hi)"""
        size, extra = divmod(self.key_space, self.partitions)
        bounds, lo = [], 0
        for pid in range(self.partitions):
            hi = lo + size + (1 if pid < extra else 0)
            bounds.append((lo, hi))
            lo = hi
        return bounds

    def key_ranges(self) -> Dict[int, KeyRange]:
        ranges = {}
        bounds = self.partition_bounds()
        for pid, (lo, hi) in enumerate(bounds):
            ranges[pid] = KeyRange(
                lo="" if pid == 0 else format_key(lo),
                hi=None if pid == len(bounds) - 1 else format_key(hi),
            )
        return ranges

    def runtime(self) -> RuntimeConfig:
        max_delay = self.network.max_delay
        return RuntimeConfig(
            lease_duration=self.lease_duration,
            safety_margin=self.safety_margin,
            renew_interval=max(1, int(self.lease_duration * self.renew_fraction)),
            checkpoint_interval=self.checkpoint_interval,
            checkpoint_commits=self.checkpoint_commits,
            txn_idle_timeout=self.txn_idle_timeout,
            vote_retention=self.vote_retention,
            stats_window=self.stats_window,
            t_high=self.t_high,
            t_low=self.t_low,
            drain_timeout=self.drain_timeout,
            detect_interval=self.detect_interval,
            mtx_timeout=self.mtx_timeout or 4 * max(1, max_delay),
            client_deadline=self.client_deadline or 8 * max(1, max_delay),
            rpc_timeout=2 * max_delay + 5,
            route_ttl=self.route_ttl,
            elastic=self.elastic,
            min_otms=self.min_otms,
            mutations=self.mutations,
        )

    def expand(self) -> List["Scenario"]:
        """Sub-runs of a sweep; a scenario without one is its own single run"""
        if self.sweep is None:
            return [self]
        variants = [("", [])]
        if self.sweep.action is not None:
            template = self.sweep.action
            events = self.sweep.events or [template.after.event if template.after else None]
            variants = []
            for event in events:
                for nth in self.sweep.nths:
                    trigger = (template.after or Trigger()).model_copy(update={"event": event, "nth": nth})
                    variants.append((f"#{event}:{nth}", [template.model_copy(update={"after": trigger, "at": None})]))
        seeds = range(self.seed, self.seed + self.sweep.seeds)
        runs = []
        for suffix, actions in variants:
            for seed in seeds:
                name = f"{self.name}{suffix}" + (f"@{seed}" if len(seeds) > 1 else "")
                runs.append(
                    self.model_copy(
                        update={
                            "name": name,
                            "seed": seed,
                            "faults": list(self.faults) + actions + list(self.sweep.extra),
                            "sweep": None,
                        }
                    )
                )
        return runs

    def header(self) -> Dict:
        """What the checkers need to judge a trace on its own"""
        return {
            "name": self.name,
            "seed": self.seed,
            "partitions": self.partitions,
            "key_ranges": {str(p): r.model_dump() for p, r in self.key_ranges().items()},
            "stats_window": self.stats_window,
            "t_high": self.t_high,
            "t_low": self.t_low,
            "elastic": self.elastic,
            "min_otms": self.min_otms,
            "lease_duration": self.lease_duration,
            "mtx_timeout": self.runtime().mtx_timeout,
            "duration": self.duration,
            "mutations": self.mutations.model_dump(),
        }


def load_scenario(path: Path) -> Scenario:
    try:
        raw = json.loads(Path(path).read_text())
        scenario = Scenario.model_validate(raw)
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        raise ScenarioError(f"{path}: {e}") from e
    if scenario.name == "scenario":
        scenario = scenario.model_copy(update={"name": Path(path).stem})
    return scenario
