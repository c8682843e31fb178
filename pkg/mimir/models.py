"""Domain types shared by every node of the simulated store."""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class Role(str, Enum):
    OTM = "otm"
    HTM = "htm"
    METADATA = "metadata"
    MASTER = "master"
    CLIENT = "client"


@dataclass(frozen=True, order=True)
class NodeId:
    role: Role
    index: int

    def __str__(self) -> str:
        return f"{self.role.value}{self.index}"

    @classmethod
    def parse(cls, name: str) -> "NodeId":
        for role in Role:
            prefix = role.value
            if name.startswith(prefix) and name[len(prefix):].isdigit():
                return cls(role, int(name[len(prefix):]))
        raise ValueError(f"Not a node name: {name!r}")


METADATA_ID = NodeId(Role.METADATA, 0)
MASTER_ID = NodeId(Role.MASTER, 0)


class Decision(str, Enum):
    COMMIT = "COMMIT"
    ABORT = "ABORT"


class Vote(str, Enum):
    YES = "YES"
    NO = "NO"


class TxnStatus(str, Enum):
    ACTIVE = "ACTIVE"
    COMMITTED = "COMMITTED"
    ABORTED = "ABORTED"


class KeyRange(BaseModel):
    """Half-open key interval [lo, hi); hi None means unbounded"""

    lo: str
    hi: Optional[str] = None

    def contains(self, key: str) -> bool:
        return key >= self.lo and (self.hi is None or key < self.hi)


class PartitionEntry(BaseModel):
    partition: int
    key_range: KeyRange
    owner: Optional[str] = None
    ownership_epoch: int = 0
    version: int = 0


class PartitionMap(BaseModel):
    entries: Dict[int, PartitionEntry]

    def lookup(self, key: str) -> PartitionEntry:
        for entry in self.entries.values():
            if entry.key_range.contains(key):
                return entry
        raise KeyError(key)

    def owned_by(self, otm: str) -> List[int]:
        return sorted(p for p, e in self.entries.items() if e.owner == otm)


class Lease(BaseModel):
    otm: str
    epoch: int
    granted_at: int
    expires_at: int

    def live_at(self, now: int) -> bool:
        # dead at expires_at exactly
        return now < self.expires_at


class Mutations(BaseModel):
    """Deliberately broken builds, used to prove the checkers can fail"""

    skip_forced_commit: bool = False
    disable_safety_margin: bool = False
    apply_mtx_on_vote: bool = False


class RuntimeConfig(BaseModel):
    """Protocol parameters handed to every node of one run (all in ticks)"""

    lease_duration: int = 10_000
    safety_margin: int = 500
    renew_interval: int = 5_000
    checkpoint_interval: int = 2_000
    checkpoint_commits: int = 100
    txn_idle_timeout: int = 4_000
    vote_retention: int = 60_000
    stats_window: int = 5_000
    t_high: int = 100
    t_low: int = 10
    drain_timeout: int = 1_000
    detect_interval: int = 250
    mtx_timeout: int = 40
    client_deadline: int = 80
    rpc_timeout: int = 25
    route_ttl: int = 1_000
    elastic: bool = True
    min_otms: int = 1
    mutations: Mutations = Field(default_factory=Mutations)
