# ---------------------------------------------------
# Metadata manager
# /services/metadata.py
# ---------------------------------------------------
"""Lease table and partition map with compare-and-swap updates.

Modeled as one reliable node; every request is handled atomically inside a
single kernel event. Replies are cached per request id so retransmitted
requests are answered, not re-executed.
"""
import logging
from typing import Dict, List, Optional, Tuple

from ..messages import (
    AcquireLease,
    CasAssign,
    CasReply,
    ExpiredLessees,
    ExpiredReply,
    GetMap,
    LeaseReply,
    MapReply,
    ReleaseLease,
    RenewLease,
    Reply,
    Ack,
)
from ..models import KeyRange, Lease, NodeId, PartitionEntry, PartitionMap, Role, RuntimeConfig
from .kernel import Kernel, MimirError, Node

logger = logging.getLogger(__name__)


class LeaseRejected(MimirError):
    pass


class CasConflict(MimirError):
    def __init__(self, entry: PartitionEntry):
        super().__init__(f"partition {entry.partition} is at version {entry.version}")
        self.entry = entry


class MetadataManager(Node):
    role = Role.METADATA

    def __init__(
        self,
        kernel: Kernel,
        node_id: NodeId,
        partitions: Dict[int, KeyRange],
        config: RuntimeConfig,
    ):
        super().__init__(kernel, node_id)
        self.config = config
        self.leases: Dict[str, Lease] = {}
        self.lease_counter = 0
        self.map = PartitionMap(
            entries={
                pid: PartitionEntry(partition=pid, key_range=key_range)
                for pid, key_range in sorted(partitions.items())
            }
        )
        # req_id -> (answered at, reply), oldest first
        self._replies: Dict[str, Tuple[int, Reply]] = {}

    # ---------------------------------------------------
    # Leases
    # ---------------------------------------------------
    def acquire_lease(self, otm: str, now: int) -> Lease:
        current = self.leases.get(otm)
        if current is not None and current.live_at(now):
            raise LeaseRejected(f"{otm} holds live lease epoch {current.epoch} until {current.expires_at}")
        self.lease_counter += 1
        lease = Lease(
            otm=otm,
            epoch=self.lease_counter,
            granted_at=now,
            expires_at=now + self.config.lease_duration,
        )
        self.leases[otm] = lease
        self.note("LEASE_GRANT", otm=otm, epoch=lease.epoch, expires_at=lease.expires_at)
        return lease.model_copy()

    def renew_lease(self, otm: str, epoch: int, now: int) -> Lease:
        current = self.leases.get(otm)
        if current is None or current.epoch != epoch:
            raise LeaseRejected(f"{otm} has no lease at epoch {epoch}")
        if not current.live_at(now):
            raise LeaseRejected(f"{otm} lease epoch {epoch} expired at {current.expires_at}")
        lease = Lease(otm=otm, epoch=epoch, granted_at=now, expires_at=now + self.config.lease_duration)
        self.leases[otm] = lease
        self.note("LEASE_RENEW", otm=otm, epoch=epoch, expires_at=lease.expires_at)
        return lease.model_copy()

    def release_lease(self, otm: str, epoch: int) -> bool:
        current = self.leases.get(otm)
        if current is None or current.epoch != epoch:
            return False
        del self.leases[otm]
        self.note("LEASE_RELEASE", otm=otm, epoch=epoch)
        return True

    def expired_lessees(self, now: int) -> List[Tuple[str, int]]:
        # closed at expiry: a lease expiring exactly at `now` is included
        return sorted(
            (lease.otm, lease.epoch) for lease in self.leases.values() if lease.expires_at <= now
        )

    # ---------------------------------------------------
    # Partition map
    # ---------------------------------------------------
    def cas_assign(self, partition: int, expected_version: int, new_owner: str, now: int) -> PartitionEntry:
        lease = self.leases.get(new_owner)
        if lease is None or not lease.live_at(now):
            raise LeaseRejected(f"{new_owner} holds no live lease")
        entry = self.map.entries.get(partition)
        if entry is None:
            raise MimirError(f"unknown partition {partition}")
        if entry.version != expected_version:
            raise CasConflict(entry.model_copy(deep=True))
        epoch = 1 + max(e.ownership_epoch for e in self.map.entries.values())
        entry.owner = new_owner
        entry.ownership_epoch = epoch
        entry.version += 1
        self.note("CAS", partition=partition, owner=new_owner, epoch=epoch, version=entry.version)
        return entry.model_copy(deep=True)

    def get_partition_map(self) -> PartitionMap:
        return self.map.model_copy(deep=True)

    def lease_of(self, otm: str) -> Optional[Lease]:
        return self.leases.get(otm)

    # ---------------------------------------------------
    # Message handlers
    # ---------------------------------------------------
    def _cached(self, src: NodeId, msg) -> bool:
        cached = self._replies.get(msg.req_id)
        if cached is None:
            return False
        self.send(src, cached[1])
        return True

    def _answer(self, src: NodeId, msg, response: Reply) -> None:
        # retransmissions stop long before a lease period is over
        horizon = self.now - self.config.lease_duration
        while self._replies and next(iter(self._replies.values()))[0] <= horizon:
            del self._replies[next(iter(self._replies))]
        self._replies[msg.req_id] = (self.now, response)
        self.reply(src, msg, response)

    def on_acquire_lease(self, src: NodeId, msg: AcquireLease) -> None:
        if self._cached(src, msg):
            return
        try:
            lease = self.acquire_lease(msg.otm, self.now)
            response = LeaseReply(granted=True, lease=lease)
        except LeaseRejected as e:
            response = LeaseReply(granted=False, reason=str(e))
        self._answer(src, msg, response)

    def on_renew_lease(self, src: NodeId, msg: RenewLease) -> None:
        if self._cached(src, msg):
            return
        try:
            lease = self.renew_lease(msg.otm, msg.epoch, self.now)
            response = LeaseReply(granted=True, lease=lease)
        except LeaseRejected as e:
            self.note("LEASE_REJECT", otm=msg.otm, epoch=msg.epoch)
            response = LeaseReply(granted=False, reason=str(e))
        self._answer(src, msg, response)

    def on_release_lease(self, src: NodeId, msg: ReleaseLease) -> None:
        if self._cached(src, msg):
            return
        self._answer(src, msg, Ack(ok=self.release_lease(msg.otm, msg.epoch)))

    def on_cas_assign(self, src: NodeId, msg: CasAssign) -> None:
        if self._cached(src, msg):
            return
        try:
            entry = self.cas_assign(msg.partition, msg.expected_version, msg.new_owner, self.now)
            response = CasReply(ok=True, entry=entry)
        except CasConflict as e:
            self.note("CAS_CONFLICT", partition=msg.partition, expected=msg.expected_version)
            response = CasReply(ok=False, entry=e.entry, reason="conflict")
        except LeaseRejected as e:
            self.note("CAS_REJECTED", partition=msg.partition, owner=msg.new_owner)
            response = CasReply(ok=False, entry=self.map.entries[msg.partition].model_copy(deep=True), reason=str(e))
        self._answer(src, msg, response)

    def on_get_map(self, src: NodeId, msg: GetMap) -> None:
        # reads are always answered fresh
        self.reply(src, msg, MapReply(entries=self.get_partition_map().entries))

    def on_expired_lessees(self, src: NodeId, msg: ExpiredLessees) -> None:
        self.reply(src, msg, ExpiredReply(lessees=self.expired_lessees(self.now)))
