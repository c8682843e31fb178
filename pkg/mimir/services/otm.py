# ---------------------------------------------------
# Owning transaction manager
# /services/otm.py
# ---------------------------------------------------
"""OTM node: lease-fenced owner of partitions.

Single-partition transactions run under strict 2PL with wait-die, writes
are buffered until commit (no-steal) and the COMMIT record is forced before
the acknowledgment. Recovery is redo of committed work from the last
checkpoint. The OTM is also the participant of minitransactions.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple

from ..messages import (
    Abort,
    AcquireLease,
    Ack,
    Begin,
    Commit,
    LeaseReply,
    LoadReport,
    MtxDecisionMsg,
    MtxRound,
    OpenPartition,
    OpenReply,
    OtmReady,
    OtmReply,
    QueryVote,
    Quiesce,
    QuiesceReply,
    Read,
    ReadCommitted,
    ReleaseLease,
    RenewLease,
    ResolveRequest,
    Retire,
    VoteReply,
    Write,
)
from ..models import (
    MASTER_ID,
    METADATA_ID,
    Decision,
    KeyRange,
    Lease,
    NodeId,
    Role,
    RuntimeConfig,
    TxnStatus,
    Vote,
)
from ..utils.helpers import retry_delays
from .kernel import FencingError, Kernel, MimirError, Node
from .locks import LockMode, LockResult, LockTable, TransactionAborted
from .wal import LogKind, LogRecord, VoteRecord, replay

logger = logging.getLogger(__name__)

REJECTED = "REJECTED_NOT_OWNER"


class KeyOutOfRange(MimirError):
    pass


class PartitionState(str, Enum):
    RECOVERING = "RECOVERING"
    OPEN = "OPEN"
    QUIESCING = "QUIESCING"
    CLOSED = "CLOSED"


@dataclass
class Txn:
    txn_id: str
    partition: int
    age: int
    last_active: int
    status: TxnStatus = TxnStatus.ACTIVE
    reads: Dict[str, Optional[str]] = field(default_factory=dict)
    write_buffer: Dict[str, str] = field(default_factory=dict)
    waiting: bool = False
    commit_lsn: int = -1


@dataclass
class PartitionRuntime:
    pid: int
    epoch: int
    volume: str
    key_range: KeyRange
    state: PartitionState = PartitionState.RECOVERING
    store: Dict[str, str] = field(default_factory=dict)
    locks: LockTable = field(default_factory=LockTable)
    txns: Dict[str, Txn] = field(default_factory=dict)
    votes: Dict[str, VoteRecord] = field(default_factory=dict)
    buffer: List[LogRecord] = field(default_factory=list)
    resolve_timers: Dict[str, int] = field(default_factory=dict)
    last_checkpoint_lsn: int = -1
    commits_since_checkpoint: int = 0
    dirty: bool = False
    drain_timer: Optional[int] = None
    quiesce: Optional[Tuple[NodeId, Quiesce]] = None

    def active_txns(self) -> List[Txn]:
        return [t for t in self.txns.values() if t.status == TxnStatus.ACTIVE]


class OwningTransactionManager(Node):
    role = Role.OTM

    def __init__(self, kernel: Kernel, node_id: NodeId, config: RuntimeConfig):
        super().__init__(kernel, node_id)
        self.config = config
        self.lease: Optional[Lease] = None
        self.partitions: Dict[int, PartitionRuntime] = {}
        self.hints: Dict[int, Tuple[Optional[str], int]] = {}
        self.handoffs: Dict[int, Tuple[int, int]] = {}
        self.load: Dict[int, Dict[int, int]] = {}
        self.txn_counter = 0
        # Begin req_id -> (answered at, reply), for retransmitted Begins
        self._begun: Dict[str, Tuple[int, OtmReply]] = {}
        self._lease_delays = retry_delays(kernel.retry_base, kernel.retry_cap)
        self._renew_call: Optional[str] = None
        self._ready_call: Optional[str] = None
        self._renew_timer: Optional[int] = None
        self._watchdog: Optional[int] = None

    # ---------------------------------------------------
    # Boot and leases
    # ---------------------------------------------------
    def on_start(self) -> None:
        logger.info(f"t={self.now} {self.name}: starting")
        self._acquire_lease()
        self.after(self.config.checkpoint_interval, self._checkpoint_tick)
        self.after(max(1, self.config.txn_idle_timeout // 2), self._idle_sweep)
        window = self.config.stats_window
        self.after(window - self.now % window, self._report_load)

    @property
    def margin(self) -> int:
        return 0 if self.config.mutations.disable_safety_margin else self.config.safety_margin

    def _acquire_lease(self) -> None:
        self.call(
            METADATA_ID,
            AcquireLease(otm=self.name),
            self._on_lease_acquired,
            timeout=self.config.rpc_timeout,
        )

    def _on_lease_acquired(self, reply: LeaseReply) -> None:
        if not reply.granted:
            logger.debug(f"t={self.now} {self.name}: lease refused ({reply.reason}), retrying")
            self.after(next(self._lease_delays), self._acquire_lease)
            return
        self._lease_delays = retry_delays(self.kernel.retry_base, self.kernel.retry_cap)
        self._set_lease(reply.lease)
        self.note("LEASE_ACQUIRED", epoch=reply.lease.epoch, expires_at=reply.lease.expires_at)
        self._renew_timer = self.after(self.config.renew_interval, self._renew)
        self._ready_call = self.call(
            MASTER_ID,
            OtmReady(otm=self.name, lease_epoch=reply.lease.epoch, partitions=sorted(self.partitions)),
            lambda _: None,
            timeout=self.config.rpc_timeout,
        )

    def _set_lease(self, lease: Lease) -> None:
        self.lease = lease
        self.cancel(self._watchdog)
        delay = max(0, lease.expires_at - self.margin - self.local_now())
        self._watchdog = self.after(delay, self._lease_watchdog, lease.epoch)

    def _lease_watchdog(self, epoch: int) -> None:
        if self.lease is None or self.lease.epoch != epoch:
            return
        if self.local_now() >= self.lease.expires_at - self.margin:
            self._lose_lease("expired")
        else:
            self._set_lease(self.lease)

    def _renew(self) -> None:
        if self.lease is None:
            return
        epoch = self.lease.epoch
        self._renew_call = self.call(
            METADATA_ID,
            RenewLease(otm=self.name, epoch=epoch),
            lambda reply: self._on_renewed(epoch, reply),
            timeout=self.config.rpc_timeout,
        )

    def _on_renewed(self, epoch: int, reply: LeaseReply) -> None:
        self._renew_call = None
        if self.lease is None or self.lease.epoch != epoch:
            return
        if not reply.granted:
            self._lose_lease(f"renewal rejected: {reply.reason}")
            return
        self._set_lease(reply.lease)
        self._renew_timer = self.after(self.config.renew_interval, self._renew)

    def _lose_lease(self, reason: str) -> None:
        """Stop serving everything, then start over with a fresh lease"""
        epoch = self.lease.epoch if self.lease else 0
        logger.warning(f"t={self.now} {self.name}: lease {epoch} lost ({reason})")
        self.note("LEASE_LOST", epoch=epoch, reason=reason)
        for part in list(self.partitions.values()):
            self._self_fence(part, "lease lost")
        self.lease = None
        self.cancel(self._watchdog)
        self.cancel(self._renew_timer)
        for req_id in (self._renew_call, self._ready_call):
            if req_id is not None:
                self.abandon(req_id)
        self._renew_call = self._ready_call = None
        self._acquire_lease()

    # ---------------------------------------------------
    # Serve guard
    # ---------------------------------------------------
    def serve_guard(
        self, partition: int, epoch: int, now: Optional[int] = None, new_work: bool = False
    ) -> bool:
        """Admit iff the lease is live with margin, the partition is ours
        and the request carries our ownership epoch"""
        now = self.local_now() if now is None else now
        part = self.partitions.get(partition)
        reason = None
        if self.lease is None or now >= self.lease.expires_at - self.margin:
            reason = "lease"
        elif part is None or part.state not in (PartitionState.OPEN, PartitionState.QUIESCING):
            reason = "not owner"
        elif part.state == PartitionState.QUIESCING and new_work:
            reason = "quiescing"
        elif epoch != part.epoch:
            reason = "epoch"
        if reason is not None:
            self.note("REJECT", partition=partition, epoch=epoch, reason=reason)
            return False
        self.note("ADMIT", partition=partition, epoch=epoch)
        return True

    def _hint(self, partition: int) -> Tuple[Optional[str], int]:
        return self.hints.get(partition, (None, 0))

    def _reject(self, src: NodeId, msg, partition: int) -> None:
        owner, epoch = self._hint(partition)
        self.reply(
            src,
            msg,
            OtmReply(status=REJECTED, txn_id=getattr(msg, "txn_id", ""), hint_owner=owner, hint_epoch=epoch),
        )

    # ---------------------------------------------------
    # Log
    # ---------------------------------------------------
    def _log(self, part: PartitionRuntime, kind: LogKind, rec_id: str, data=None, force: bool = False) -> int:
        part.buffer.append(LogRecord(kind, rec_id, part.epoch, data or {}))
        part.dirty = True
        if force:
            return self._flush(part)
        return -1

    def _flush(self, part: PartitionRuntime) -> int:
        lsn = -1
        while part.buffer:
            lsn = self.kernel.volume_append(part.volume, self.id, part.buffer[0].encode(), part.epoch)
            part.buffer.pop(0)
        return lsn

    def checkpoint(self, part: PartitionRuntime) -> int:
        self._prune_votes(part)
        data = {
            "state": dict(part.store),
            "votes": {m: v.to_json() for m, v in sorted(part.votes.items())},
        }
        lsn = self._log(part, LogKind.CHECKPOINT, f"p{part.pid}", data, force=True)
        part.last_checkpoint_lsn = lsn
        part.commits_since_checkpoint = 0
        part.dirty = False
        self.note("CHECKPOINT", partition=part.pid, epoch=part.epoch, lsn=lsn, keys=len(part.store))
        return lsn

    def _prune_votes(self, part: PartitionRuntime) -> None:
        """Forget settled votes no resolver can still ask about"""
        horizon = self.now - self.config.vote_retention
        stale = [m for m, v in part.votes.items() if v.settled and v.settled_at is not None and v.settled_at <= horizon]
        for mtx_id in stale:
            del part.votes[mtx_id]
        if stale:
            logger.debug(f"t={self.now} {self.name}: p{part.pid} forgot {len(stale)} settled votes")

    def _checkpoint_tick(self) -> None:
        for part in list(self.partitions.values()):
            if part.state in (PartitionState.OPEN, PartitionState.QUIESCING) and part.dirty:
                try:
                    self.checkpoint(part)
                except FencingError:
                    self._self_fence(part, "checkpoint append rejected")
        self.after(self.config.checkpoint_interval, self._checkpoint_tick)

    def _self_fence(self, part: PartitionRuntime, reason: str) -> None:
        logger.warning(f"t={self.now} {self.name}: self-fencing p{part.pid} ({reason})")
        self.note("SELF_FENCE", partition=part.pid, epoch=part.epoch, reason=reason)
        self.kernel.detach_volume(part.volume, self.id)
        self._close(part, None)

    def _close(self, part: PartitionRuntime, hint: Optional[str]) -> None:
        self.cancel(part.drain_timer)
        for timer in part.resolve_timers.values():
            self.cancel(timer)
        for txn in part.active_txns():
            txn.status = TxnStatus.ABORTED
        part.state = PartitionState.CLOSED
        self.partitions.pop(part.pid, None)
        self.hints[part.pid] = (hint, 0)
        self.note("CLOSED", partition=part.pid, epoch=part.epoch)

    # ---------------------------------------------------
    # Transactions
    # ---------------------------------------------------
    def on_begin(self, src: NodeId, msg: Begin) -> None:
        if msg.req_id in self._begun:
            self.reply(src, msg, self._begun[msg.req_id][1])
            return
        if not self.serve_guard(msg.partition, msg.epoch, new_work=True):
            self._reject(src, msg, msg.partition)
            return
        part = self.partitions[msg.partition]
        self.txn_counter += 1
        txn_id = f"{self.name}:{self.lease.epoch}:{self.txn_counter}"
        part.txns[txn_id] = Txn(txn_id, msg.partition, age=self.txn_counter, last_active=self.now)
        self._log(part, LogKind.BEGIN, txn_id)
        self.note("TXN_BEGIN", partition=msg.partition, txn=txn_id, epoch=part.epoch)
        response = OtmReply(status="OK", txn_id=txn_id)
        self._begun[msg.req_id] = (self.now, response)
        self.reply(src, msg, response)

    def _admitted_txn(self, src: NodeId, msg) -> Optional[Tuple[PartitionRuntime, Txn]]:
        if not self.serve_guard(msg.partition, msg.epoch):
            self._reject(src, msg, msg.partition)
            return None
        part = self.partitions[msg.partition]
        txn = part.txns.get(msg.txn_id)
        if txn is None or txn.status != TxnStatus.ACTIVE:
            self.reply(
                src,
                msg,
                OtmReply(status="ABORTED", txn_id=msg.txn_id, reason="unknown transaction", retryable=True),
            )
            return None
        txn.last_active = self.now
        return part, txn

    def _require_key(self, part: PartitionRuntime, key: str) -> None:
        if not part.key_range.contains(key):
            raise KeyOutOfRange(f"{key} outside p{part.pid}")

    def _lock(self, part: PartitionRuntime, txn: Txn, key: str, mode: LockMode, on_grant) -> bool:
        """True when granted now; False when queued; raises on wait-die"""
        result = part.locks.acquire(txn.txn_id, key, mode, txn.age, on_grant)
        if result == LockResult.DIE:
            raise TransactionAborted(f"wait-die on {key}", retryable=True)
        if result == LockResult.WAITING:
            txn.waiting = True
            self.note("LOCK_WAIT", partition=part.pid, txn=txn.txn_id, key=key, mode=mode.value)
            return False
        return True

    def on_read(self, src: NodeId, msg: Read) -> None:
        admitted = self._admitted_txn(src, msg)
        if admitted is None:
            return
        part, txn = admitted
        try:
            self._require_key(part, msg.key)
            if msg.key in txn.write_buffer:
                value = txn.write_buffer[msg.key]
                self.note("TXN_READ", partition=part.pid, txn=txn.txn_id, key=msg.key, value=value, own=True)
                self.reply(src, msg, OtmReply(status="OK", txn_id=txn.txn_id, value=value))
                return
            if self._lock(part, txn, msg.key, LockMode.SHARED, lambda: self._finish_read(src, msg, part, txn)):
                self._finish_read(src, msg, part, txn)
        except KeyOutOfRange as e:
            self.reply(src, msg, OtmReply(status="ERROR", txn_id=txn.txn_id, reason=str(e)))
        except TransactionAborted as e:
            self._abort_txn(part, txn, e.reason)
            self.reply(src, msg, OtmReply(status="ABORTED", txn_id=txn.txn_id, reason=e.reason, retryable=True))

    def _finish_read(self, src: NodeId, msg: Read, part: PartitionRuntime, txn: Txn) -> None:
        if txn.status != TxnStatus.ACTIVE or part.state == PartitionState.CLOSED:
            return
        txn.waiting = False
        value = part.store.get(msg.key)
        txn.reads.setdefault(msg.key, value)
        self.note(
            "TXN_READ", partition=part.pid, txn=txn.txn_id, key=msg.key, value=value, own=False, epoch=part.epoch
        )
        self.reply(src, msg, OtmReply(status="OK", txn_id=txn.txn_id, value=value))

    def on_write(self, src: NodeId, msg: Write) -> None:
        admitted = self._admitted_txn(src, msg)
        if admitted is None:
            return
        part, txn = admitted
        try:
            self._require_key(part, msg.key)
            if self._lock(part, txn, msg.key, LockMode.EXCLUSIVE, lambda: self._finish_write(src, msg, part, txn)):
                self._finish_write(src, msg, part, txn)
        except KeyOutOfRange as e:
            self.reply(src, msg, OtmReply(status="ERROR", txn_id=txn.txn_id, reason=str(e)))
        except TransactionAborted as e:
            self._abort_txn(part, txn, e.reason)
            self.reply(src, msg, OtmReply(status="ABORTED", txn_id=txn.txn_id, reason=e.reason, retryable=True))

    def _finish_write(self, src: NodeId, msg: Write, part: PartitionRuntime, txn: Txn) -> None:
        if txn.status != TxnStatus.ACTIVE or part.state == PartitionState.CLOSED:
            return
        txn.waiting = False
        txn.write_buffer[msg.key] = msg.value
        self.note("TXN_WRITE", partition=part.pid, txn=txn.txn_id, key=msg.key, value=msg.value)
        self.reply(src, msg, OtmReply(status="OK", txn_id=txn.txn_id))

    def on_commit(self, src: NodeId, msg: Commit) -> None:
        part = self.partitions.get(msg.partition)
        done = part.txns.get(msg.txn_id) if part else None
        if done is not None and done.status == TxnStatus.COMMITTED:
            self.reply(src, msg, OtmReply(status="OK", txn_id=done.txn_id, lsn=done.commit_lsn))
            return
        admitted = self._admitted_txn(src, msg)
        if admitted is None:
            return
        part, txn = admitted
        if txn.waiting:
            self._abort_txn(part, txn, "commit while waiting")
            self.reply(src, msg, OtmReply(status="ABORTED", txn_id=txn.txn_id, reason="commit while waiting"))
            return
        try:
            lsn = self.commit(part, txn)
        except FencingError:
            self._abort_txn(part, txn, "fenced", log=False)
            self._self_fence(part, "commit append rejected")
            self.reply(src, msg, OtmReply(status="ABORTED", txn_id=txn.txn_id, reason="fenced", retryable=True))
            return
        self.reply(src, msg, OtmReply(status="OK", txn_id=txn.txn_id, lsn=lsn))
        self._after_finish(part)

    def commit(self, part: PartitionRuntime, txn: Txn) -> int:
        for key, value in sorted(txn.write_buffer.items()):
            self._log(part, LogKind.UPDATE, txn.txn_id, {"key": key, "value": value})
        forced = not self.config.mutations.skip_forced_commit
        lsn = self._log(part, LogKind.COMMIT, txn.txn_id, force=forced)
        part.store.update(txn.write_buffer)
        txn.status = TxnStatus.COMMITTED
        txn.commit_lsn = lsn
        self._count_commit(part)
        self.note(
            "COMMIT",
            partition=part.pid,
            txn=txn.txn_id,
            epoch=part.epoch,
            lsn=lsn,
            writes=dict(txn.write_buffer),
            reads=dict(txn.reads),
        )
        self._release(part, txn.txn_id)
        return lsn

    def _count_commit(self, part: PartitionRuntime) -> None:
        window = self.now // self.config.stats_window
        counts = self.load.setdefault(window, {})
        counts[part.pid] = counts.get(part.pid, 0) + 1
        part.commits_since_checkpoint += 1

    def _release(self, part: PartitionRuntime, holder: str) -> None:
        keys = sorted(part.locks.held_by(holder))
        self.note("LOCKS_RELEASED", partition=part.pid, txn=holder, keys=keys)
        part.locks.release_all(holder)

    def _abort_txn(self, part: PartitionRuntime, txn: Txn, reason: str, log: bool = True) -> None:
        if txn.status != TxnStatus.ACTIVE:
            return
        txn.status = TxnStatus.ABORTED
        if log:
            self._log(part, LogKind.ABORT, txn.txn_id)
        self.note("TXN_ABORT", partition=part.pid, txn=txn.txn_id, reason=reason)
        self._release(part, txn.txn_id)

    def on_abort(self, src: NodeId, msg: Abort) -> None:
        part = self.partitions.get(msg.partition)
        txn = part.txns.get(msg.txn_id) if part else None
        if txn is not None and txn.status == TxnStatus.ACTIVE:
            self._abort_txn(part, txn, "client abort")
            self._after_finish(part)
        self.reply(src, msg, OtmReply(status="OK", txn_id=msg.txn_id))

    def on_read_committed(self, src: NodeId, msg: ReadCommitted) -> None:
        if not self.serve_guard(msg.partition, msg.epoch, new_work=True):
            self._reject(src, msg, msg.partition)
            return
        part = self.partitions[msg.partition]
        if not part.key_range.contains(msg.key):
            self.reply(src, msg, OtmReply(status="ERROR", reason=f"{msg.key} outside p{part.pid}"))
            return
        value = part.store.get(msg.key)
        self.note("RO_READ", partition=part.pid, key=msg.key, value=value, epoch=part.epoch)
        self.reply(src, msg, OtmReply(status="OK", value=value))

    def _idle_sweep(self) -> None:
        horizon = self.now - self.config.txn_idle_timeout
        for part in list(self.partitions.values()):
            for txn in list(part.txns.values()):
                if txn.last_active > horizon:
                    continue
                if txn.status == TxnStatus.ACTIVE:
                    self._abort_txn(part, txn, "idle")
                else:
                    del part.txns[txn.txn_id]
            self._after_finish(part)
        for req_id in [r for r, (at, _) in self._begun.items() if at <= horizon]:
            del self._begun[req_id]
        self.after(max(1, self.config.txn_idle_timeout // 2), self._idle_sweep)

    # ---------------------------------------------------
    # Open (recover) and quiesce (handoff)
    # ---------------------------------------------------
    def on_open_partition(self, src: NodeId, msg: OpenPartition) -> None:
        current = self.partitions.get(msg.partition)
        if current is not None and current.epoch == msg.epoch:
            self.reply(src, msg, OpenReply(ok=True, keys=len(current.store), in_doubt=self._in_doubt(current)))
            return
        if self.lease is None:
            self.reply(src, msg, OpenReply(ok=False, reason="no lease"))
            return
        if current is not None:
            self._self_fence(current, "reopened at a newer epoch")
        try:
            part = self.recover(msg)
        except FencingError as e:
            logger.warning(f"t={self.now} {self.name}: cannot open p{msg.partition}: {e}")
            self.reply(src, msg, OpenReply(ok=False, reason="fenced"))
            return
        part.state = PartitionState.OPEN
        self.partitions[part.pid] = part
        self.hints.pop(part.pid, None)
        self.note("OPENED", partition=part.pid, epoch=part.epoch)
        self.reply(src, msg, OpenReply(ok=True, keys=len(part.store), in_doubt=self._in_doubt(part)))

    def recover(self, msg: OpenPartition) -> PartitionRuntime:
        self.kernel.attach_volume(msg.volume, self.id, msg.epoch)
        replayed = replay(self.kernel.volume_read(msg.volume, self.id))
        if replayed.torn_at is not None:
            self.kernel.volume_truncate(msg.volume, self.id, msg.epoch, replayed.torn_at)
        part = PartitionRuntime(
            pid=msg.partition,
            epoch=msg.epoch,
            volume=msg.volume,
            key_range=msg.key_range,
            store=replayed.committed,
            votes=replayed.votes,
            last_checkpoint_lsn=replayed.last_checkpoint_lsn,
        )
        for vote in part.votes.values():
            if vote.settled and vote.settled_at is None:
                vote.settled_at = self.now
        for mtx_id in replayed.in_doubt:
            vote = part.votes[mtx_id]
            self.txn_counter += 1
            for key, mode in sorted(vote.keys.items()):
                part.locks.try_acquire(f"mtx:{mtx_id}", key, LockMode(mode), self.txn_counter)
            self._arm_resolve(part, mtx_id)
        self.note(
            "RECOVERED",
            partition=part.pid,
            epoch=part.epoch,
            keys=len(part.store),
            records=replayed.records,
            checkpoint_lsn=replayed.last_checkpoint_lsn,
            torn_at=replayed.torn_at,
            in_doubt=replayed.in_doubt,
        )
        return part

    def _in_doubt(self, part: PartitionRuntime) -> List[str]:
        return sorted(m for m, v in part.votes.items() if v.in_doubt)

    def on_quiesce(self, src: NodeId, msg: Quiesce) -> None:
        done = self.handoffs.get(msg.partition)
        if done is not None and done[0] == msg.epoch:
            self.reply(src, msg, QuiesceReply(ok=True, handoff_lsn=done[1]))
            return
        part = self.partitions.get(msg.partition)
        if part is None or part.epoch != msg.epoch or self.lease is None:
            self.reply(src, msg, QuiesceReply(ok=False, reason="not owner"))
            return
        if part.state == PartitionState.QUIESCING:
            part.quiesce = (src, msg)
            return
        part.state = PartitionState.QUIESCING
        part.quiesce = (src, msg)
        self.note("QUIESCE", partition=part.pid, epoch=part.epoch, target=msg.target, active=len(part.active_txns()))
        if not self._try_handoff(part):
            part.drain_timer = self.after(self.config.drain_timeout, self._drain_expired, part.pid, part.epoch)

    def _after_finish(self, part: PartitionRuntime) -> None:
        if part.state == PartitionState.CLOSED:
            return
        if part.commits_since_checkpoint >= self.config.checkpoint_commits:
            try:
                self.checkpoint(part)
            except FencingError:
                self._self_fence(part, "checkpoint append rejected")
                return
        if part.state == PartitionState.QUIESCING:
            self._try_handoff(part)

    def _drain_expired(self, pid: int, epoch: int) -> None:
        part = self.partitions.get(pid)
        if part is None or part.epoch != epoch or part.state != PartitionState.QUIESCING:
            return
        part.drain_timer = None
        for txn in part.active_txns():
            self._abort_txn(part, txn, "migration")
        self._try_handoff(part)

    def _try_handoff(self, part: PartitionRuntime) -> bool:
        if part.active_txns():
            return False
        src, msg = part.quiesce
        try:
            self.checkpoint(part)
            lsn = self._log(part, LogKind.HANDOFF, f"p{part.pid}", {"target": msg.target}, force=True)
        except FencingError:
            self._self_fence(part, "handoff append rejected")
            self.reply(src, msg, QuiesceReply(ok=False, reason="fenced"))
            return True
        self.kernel.detach_volume(part.volume, self.id)
        self.handoffs[part.pid] = (part.epoch, lsn)
        self.note("HANDOFF", partition=part.pid, epoch=part.epoch, lsn=lsn, target=msg.target)
        self._close(part, msg.target)
        self.reply(src, msg, QuiesceReply(ok=True, handoff_lsn=lsn))
        return True

    # ---------------------------------------------------
    # Minitransaction participant
    # ---------------------------------------------------
    def _vote_reply(self, vote: VoteRecord) -> VoteReply:
        return VoteReply(vote=vote.vote, decision=vote.decision, reads=dict(vote.reads))

    def on_mtx_round(self, src: NodeId, msg: MtxRound) -> None:
        if not self.serve_guard(msg.partition, msg.epoch, new_work=True):
            owner, epoch = self._hint(msg.partition)
            self.reply(src, msg, VoteReply(status=REJECTED, hint_owner=owner, hint_epoch=epoch))
            return
        part = self.partitions[msg.partition]
        known = part.votes.get(msg.mtx_id)
        if known is not None:
            self.reply(src, msg, self._vote_reply(known))
            return
        self.reply(src, msg, self.mtx_participate(part, msg))

    def mtx_participate(self, part: PartitionRuntime, msg: MtxRound) -> VoteReply:
        holder = f"mtx:{msg.mtx_id}"
        modes: Dict[str, str] = {k: LockMode.SHARED.value for k in list(msg.compares) + list(msg.reads)}
        modes.update({k: LockMode.EXCLUSIVE.value for k in msg.writes})
        self.txn_counter += 1
        locked = all(part.key_range.contains(k) for k in modes)
        if locked:
            for key in sorted(modes):
                if not part.locks.try_acquire(holder, key, LockMode(modes[key]), self.txn_counter):
                    locked = False
                    break
        observed = {k: part.store.get(k) for k in sorted(msg.compares)}
        matched = locked and all(observed[k] == v for k, v in msg.compares.items())
        reads = {k: part.store.get(k) for k in sorted(msg.reads)} if matched else {}
        record = VoteRecord(
            vote=Vote.YES if matched else Vote.NO,
            keys=modes,
            writes=dict(msg.writes),
            reads=reads,
            participants=sorted(msg.participants),
        )
        data = {"vote": record.vote.value, "keys": modes, "writes": record.writes, "reads": reads,
                "participants": record.participants}
        try:
            self._log(part, LogKind.MTX_VOTE, msg.mtx_id, data, force=matched)
        except FencingError:
            part.locks.release_all(holder)
            self._self_fence(part, "vote append rejected")
            return VoteReply(status=REJECTED)
        part.votes[msg.mtx_id] = record
        self.note(
            "MTX_VOTE",
            partition=part.pid,
            mtx=msg.mtx_id,
            vote=record.vote.value,
            epoch=part.epoch,
            locked=locked,
            compares={k: [v, observed[k]] for k, v in sorted(msg.compares.items())},
            reads=reads,
        )
        if not matched:
            record.settled_at = self.now
            self._release(part, holder)
            return self._vote_reply(record)
        if self.config.mutations.apply_mtx_on_vote:
            part.store.update(record.writes)
            self.note("MTX_APPLY", partition=part.pid, mtx=msg.mtx_id, writes=record.writes, epoch=part.epoch)
        self._arm_resolve(part, msg.mtx_id)
        return self._vote_reply(record)

    def on_mtx_decision_msg(self, src: NodeId, msg: MtxDecisionMsg) -> None:
        part = self.partitions.get(msg.partition)
        if part is None or part.state not in (PartitionState.OPEN, PartitionState.QUIESCING):
            logger.debug(f"t={self.now} {self.name}: decision for {msg.mtx_id} on unowned p{msg.partition}")
            return
        vote = part.votes.setdefault(msg.mtx_id, VoteRecord())
        if vote.decision is not None:
            return
        try:
            self._decide(part, msg.mtx_id, vote, msg.decision)
        except FencingError:
            self._self_fence(part, "decision append rejected")
            return
        self._after_finish(part)

    def _decide(self, part: PartitionRuntime, mtx_id: str, vote: VoteRecord, decision: Decision) -> None:
        if decision == Decision.COMMIT:
            for key, value in sorted(vote.writes.items()):
                self._log(part, LogKind.UPDATE, mtx_id, {"key": key, "value": value})
            self._log(part, LogKind.MTX_DECISION, mtx_id, {"decision": decision.value}, force=True)
        else:
            self._log(part, LogKind.MTX_DECISION, mtx_id, {"decision": decision.value})
        vote.decision = decision
        vote.settled_at = self.now
        self.cancel(part.resolve_timers.pop(mtx_id, None))
        self.note("MTX_DECISION", partition=part.pid, mtx=mtx_id, decision=decision.value, epoch=part.epoch)
        if decision == Decision.COMMIT and vote.vote == Vote.YES:
            if not self.config.mutations.apply_mtx_on_vote:
                part.store.update(vote.writes)
                self.note("MTX_APPLY", partition=part.pid, mtx=mtx_id, writes=dict(vote.writes), epoch=part.epoch)
            self._count_commit(part)
        self._release(part, f"mtx:{mtx_id}")

    def on_query_vote(self, src: NodeId, msg: QueryVote) -> None:
        if not self.serve_guard(msg.partition, msg.epoch):
            owner, epoch = self._hint(msg.partition)
            self.reply(src, msg, VoteReply(status=REJECTED, hint_owner=owner, hint_epoch=epoch))
            return
        part = self.partitions[msg.partition]
        vote = part.votes.get(msg.mtx_id)
        if vote is None or vote.vote is None:
            # vote-on-query: a late round can no longer turn this into YES
            try:
                self._log(part, LogKind.MTX_VOTE, msg.mtx_id, {"vote": Vote.NO.value}, force=True)
            except FencingError:
                self._self_fence(part, "vote append rejected")
                self.reply(src, msg, VoteReply(status=REJECTED))
                return
            vote = part.votes.setdefault(msg.mtx_id, VoteRecord())
            vote.vote = Vote.NO
            vote.settled_at = self.now
            self.note("MTX_VOTE", partition=part.pid, mtx=msg.mtx_id, vote=Vote.NO.value, epoch=part.epoch,
                      on_query=True)
        self.reply(src, msg, self._vote_reply(vote))

    def _arm_resolve(self, part: PartitionRuntime, mtx_id: str) -> None:
        self.cancel(part.resolve_timers.get(mtx_id))
        part.resolve_timers[mtx_id] = self.after(
            self.config.mtx_timeout, self._resolve_due, part.pid, part.epoch, mtx_id
        )

    def _resolve_due(self, pid: int, epoch: int, mtx_id: str) -> None:
        part = self.partitions.get(pid)
        if part is None or part.epoch != epoch:
            return
        vote = part.votes.get(mtx_id)
        if vote is None or not vote.in_doubt:
            return
        self.note("MTX_RESOLVE_REQUEST", partition=pid, mtx=mtx_id)
        self.send(MASTER_ID, ResolveRequest(mtx_id=mtx_id, participants=vote.participants, partition=pid))
        self._arm_resolve(part, mtx_id)

    # ---------------------------------------------------
    # Load, retirement, audit
    # ---------------------------------------------------
    def report_load(self, window: int) -> Dict[int, int]:
        counts = {pid: 0 for pid in self.partitions}
        counts.update(self.load.get(window, {}))
        return dict(sorted(counts.items()))

    def _report_load(self) -> None:
        window = self.now // self.config.stats_window - 1
        if self.lease is not None:
            self.send(MASTER_ID, LoadReport(otm=self.name, window=window, per_partition=self.report_load(window)))
        for old in [w for w in self.load if w <= window]:
            del self.load[old]
        self.after(self.config.stats_window, self._report_load)

    def on_retire(self, src: NodeId, msg: Retire) -> None:
        if self.partitions:
            self.reply(src, msg, Ack(ok=False, reason=f"owns {sorted(self.partitions)}"))
            return
        if self.lease is not None:
            self.send(METADATA_ID, ReleaseLease(otm=self.name, epoch=self.lease.epoch))
        self.reply(src, msg, Ack(ok=True))
        self.note("RETIRED")
        self.kernel.halt_node(self.id)

    def audit(self) -> None:
        for pid, part in sorted(self.partitions.items()):
            if part.state in (PartitionState.OPEN, PartitionState.QUIESCING):
                self.note("AUDIT", partition=pid, epoch=part.epoch, state=dict(part.store))

    def owned(self) -> Set[int]:
        return set(self.partitions)
