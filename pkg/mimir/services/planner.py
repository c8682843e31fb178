"""Greedy, deterministic rebalance planner used by the master."""
import logging
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field

from ..models import NodeId
from .kernel import ConfigurationError

logger = logging.getLogger(__name__)

SPAWN_PREFIX = "spawn:"


class LoadStats(BaseModel):
    """Committed transactions per partition over one stats window"""

    per_partition: Dict[int, int]
    owners: Dict[int, str]
    per_otm: Dict[str, int] = Field(default_factory=dict)

    @classmethod
    def build(cls, per_partition: Dict[int, int], owners: Dict[int, str], otms: List[str]) -> "LoadStats":
        per_otm = {otm: 0 for otm in otms}
        for pid, owner in owners.items():
            per_otm[owner] = per_otm.get(owner, 0) + per_partition.get(pid, 0)
        return cls(per_partition=dict(per_partition), owners=dict(owners), per_otm=per_otm)


class Move(BaseModel):
    partition: int
    src: str
    dst: str


class MigrationPlan(BaseModel):
    spawns: int = 0
    retires: List[str] = Field(default_factory=list)
    moves: List[Move] = Field(default_factory=list)
    saturated: List[str] = Field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.spawns or self.retires or self.moves)


def _node_order(otm: str) -> Tuple[int, int]:
    if otm.startswith(SPAWN_PREFIX):
        return 1, int(otm[len(SPAWN_PREFIX):])
    return 0, NodeId.parse(otm).index


def plan_rebalance(stats: LoadStats, t_high: int, t_low: int, min_otms: int = 1) -> MigrationPlan:
    """Move load off OTMs above t_high, spawning where nothing fits, then
    retire at most one OTM below t_low whose partitions fit elsewhere.

    Ties break on the lowest partition id, then the lowest node index.
    """
    if t_low >= t_high:
        raise ConfigurationError(f"t_low {t_low} must be below t_high {t_high}")
    weight = stats.per_partition
    load: Dict[str, int] = dict(stats.per_otm)
    owned: Dict[str, List[int]] = {otm: [] for otm in load}
    for pid, owner in sorted(stats.owners.items()):
        owned.setdefault(owner, []).append(pid)
        load.setdefault(owner, 0)
    plan = MigrationPlan()
    moved = set()

    def least_loaded(exclude: List[str]) -> Optional[str]:
        targets = [o for o in load if o not in exclude]
        return min(targets, key=lambda o: (load[o], _node_order(o))) if targets else None

    def move(pid: int, src: str, dst: str) -> None:
        owned[src].remove(pid)
        owned[dst].append(pid)
        load[src] -= weight.get(pid, 0)
        load[dst] += weight.get(pid, 0)
        moved.add(pid)
        plan.moves.append(Move(partition=pid, src=src, dst=dst))

    while True:
        over = [o for o in load if load[o] > t_high and o not in plan.saturated]
        if not over:
            break
        src = max(over, key=lambda o: (load[o], [-x for x in _node_order(o)]))
        candidates = sorted(
            (p for p in owned[src] if p not in moved and 0 < weight.get(p, 0) <= t_high),
            key=lambda p: (-weight.get(p, 0), p),
        )
        if not candidates:
            logger.info(f"planner: {src} saturated at load {load[src]}")
            plan.saturated.append(src)
            continue
        # the lightest single move that brings src back under t_high, else the hottest
        sufficient = [p for p in candidates if load[src] - weight.get(p, 0) <= t_high]
        pid = min(sufficient, key=lambda p: (weight.get(p, 0), p)) if sufficient else candidates[0]
        dst = least_loaded([src])
        if dst is None or load[dst] + weight.get(pid, 0) > t_high:
            dst = f"{SPAWN_PREFIX}{plan.spawns}"
            plan.spawns += 1
            load[dst] = 0
            owned[dst] = []
        move(pid, src, dst)

    if plan.moves or plan.spawns or len(load) < 2 or len(load) <= min_otms:
        return plan

    lightest = min(load, key=lambda o: (load[o], _node_order(o)))
    if load[lightest] >= t_low:
        return plan
    trial = dict(load)
    placements = []
    for pid in sorted(owned[lightest], key=lambda p: (-weight.get(p, 0), p)):
        targets = [o for o in trial if o != lightest]
        dst = min(targets, key=lambda o: (trial[o], _node_order(o)))
        if trial[dst] + weight.get(pid, 0) > t_high:
            return plan
        trial[dst] += weight.get(pid, 0)
        placements.append((pid, dst))
    for pid, dst in placements:
        move(pid, lightest, dst)
    plan.retires.append(lightest)
    return plan
