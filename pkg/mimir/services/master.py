# ---------------------------------------------------
# Master
# /services/master.py
# ---------------------------------------------------
"""Control plane: failure detection, recovery, migration, elasticity and
resolution of in-doubt minitransactions.

Every action is guarded by a CAS on the partition map, so repeating one
after a lost reply is harmless. At most one operation per partition is in
flight (`busy`).
"""
import logging
from typing import Callable, Dict, List, Optional, Set

from pydantic import BaseModel, Field

from ..messages import (
    Ack,
    CasAssign,
    CasReply,
    ExpiredLessees,
    ExpiredReply,
    GetMap,
    LoadReport,
    MapReply,
    MtxDecisionMsg,
    OpenPartition,
    OpenReply,
    OtmReady,
    QueryVote,
    Quiesce,
    QuiesceReply,
    ResolveRequest,
    Retire,
    VoteReply,
)
from ..models import METADATA_ID, Decision, NodeId, PartitionEntry, Role, RuntimeConfig, Vote
from ..utils.helpers import retry_delays
from .kernel import Kernel, Node, NodeFactory
from .planner import SPAWN_PREFIX, LoadStats, MigrationPlan, Move, plan_rebalance

logger = logging.getLogger(__name__)

Done = Callable[[bool], None]


def volume_of(partition: int) -> str:
    return f"vol-p{partition}"


class MtxDecisionRecord(BaseModel):
    mtx_id: str
    decision: Decision
    participants: List[int] = Field(default_factory=list)


class _Resolution:
    def __init__(self, participants: List[int]):
        self.participants = sorted(participants)
        self.votes: Dict[int, Vote] = {}
        self.delays = {}


class Master(Node):
    role = Role.MASTER

    def __init__(
        self,
        kernel: Kernel,
        node_id: NodeId,
        config: RuntimeConfig,
        otm_factory: NodeFactory,
        initial_otms: List[str],
    ):
        super().__init__(kernel, node_id)
        self.config = config
        self.otm_factory = otm_factory
        self.initial_otms = list(initial_otms)
        self.map: Dict[int, PartitionEntry] = {}
        self.ready: Dict[str, int] = {}
        self.busy: Set[int] = set()
        self.recovering: Dict[str, Optional[str]] = {}
        self.pending_spawns: Dict[str, Callable[[str], None]] = {}
        self.decisions: Dict[str, MtxDecisionRecord] = {}
        self.resolving: Dict[str, _Resolution] = {}
        self.reports: Dict[int, Dict[str, Dict[int, int]]] = {}
        self.plans_in_flight = 0
        self._started = False

    @property
    def _rpc(self) -> int:
        return self.config.rpc_timeout

    def on_start(self) -> None:
        self.call(METADATA_ID, GetMap(), self._on_map, timeout=self._rpc)
        self.after(self.config.detect_interval, self._detect_tick)
        self.after(self.config.stats_window + self._rpc, self._plan_tick)
        self.after(8 * self._rpc, self._startup_grace)

    def _on_map(self, reply: MapReply) -> None:
        for pid, entry in reply.entries.items():
            known = self.map.get(pid)
            if known is None or entry.version > known.version:
                self.map[pid] = entry
        self._assign_unowned()

    def _startup_grace(self) -> None:
        self._started = True
        self._assign_unowned()

    def owned_by(self, otm: str) -> List[int]:
        return sorted(pid for pid, entry in self.map.items() if entry.owner == otm)

    # ---------------------------------------------------
    # Registration and placement
    # ---------------------------------------------------
    def on_otm_ready(self, src: NodeId, msg: OtmReady) -> None:
        self.reply(src, msg, Ack(ok=True))
        if self.ready.get(msg.otm) == msg.lease_epoch:
            return
        self.ready[msg.otm] = msg.lease_epoch
        self.note("OTM_READY", otm=msg.otm, epoch=msg.lease_epoch, partitions=msg.partitions)
        lost = [pid for pid in self.owned_by(msg.otm) if pid not in msg.partitions]
        if lost:
            # restarted or fenced owner: what it lost must be recovered elsewhere
            self.ready.pop(msg.otm, None)
            self.recover_failed_otm(msg.otm)
            self.ready[msg.otm] = msg.lease_epoch
        waiter = self.pending_spawns.pop(msg.otm, None)
        if waiter is not None:
            waiter(msg.otm)
        self._assign_unowned()

    def _assign_unowned(self) -> None:
        if not self.map:
            return
        if not self._started and not all(o in self.ready for o in self.initial_otms):
            return
        candidates = sorted(o for o in self.ready if o not in self.recovering)
        if not candidates:
            return
        counts = {o: len(self.owned_by(o)) for o in candidates}
        for pid, entry in sorted(self.map.items()):
            if entry.owner is not None or pid in self.busy:
                continue
            dst = min(candidates, key=lambda o: (counts[o], NodeId.parse(o).index))
            counts[dst] += 1
            self.busy.add(pid)
            self.note("ASSIGN", partition=pid, otm=dst)
            self._transfer(pid, dst, entry.version, lambda ok, p=pid: self.busy.discard(p))

    def _transfer(self, pid: int, dst: str, expected_version: int, on_done: Done) -> None:
        """CAS the partition to dst, then open it there"""

        def on_cas(reply: CasReply) -> None:
            self._learn(reply.entry)
            if not reply.ok:
                logger.info(f"t={self.now} master: cas p{pid} -> {dst} failed ({reply.reason})")
                on_done(False)
                return
            self._open(pid, dst, on_done)

        self.call(
            METADATA_ID,
            CasAssign(partition=pid, expected_version=expected_version, new_owner=dst),
            on_cas,
            timeout=self._rpc,
        )

    def _open(self, pid: int, dst: str, on_done: Done, attempt: int = 0) -> None:
        entry = self.map[pid]

        def on_open(reply: OpenReply) -> None:
            if reply.ok:
                on_done(True)
                return
            current = self.map.get(pid)
            if dst in self.ready and current.owner == dst and attempt < 5:
                self.after(self._rpc * (attempt + 1), self._open, pid, dst, on_done, attempt + 1)
                return
            on_done(False)

        self.call(
            NodeId.parse(dst),
            OpenPartition(
                partition=pid, epoch=entry.ownership_epoch, volume=volume_of(pid), key_range=entry.key_range
            ),
            on_open,
            timeout=self._rpc,
            retries=4,
            on_fail=lambda: on_done(False),
        )

    def _learn(self, entry: Optional[PartitionEntry]) -> None:
        if entry is None:
            return
        known = self.map.get(entry.partition)
        if known is None or entry.version >= known.version:
            self.map[entry.partition] = entry

    def _refresh_map(self) -> None:
        self.call(METADATA_ID, GetMap(), self._on_map, timeout=self._rpc)

    # ---------------------------------------------------
    # Failure detection and recovery
    # ---------------------------------------------------
    def _detect_tick(self) -> None:
        self.call(METADATA_ID, ExpiredLessees(), self._on_expired, timeout=self._rpc, retries=0)
        self.after(self.config.detect_interval, self._detect_tick)

    def _on_expired(self, reply: ExpiredReply) -> None:
        for otm in self.detect_failures(reply.lessees):
            self.note("DETECT", otm=otm, partitions=self.owned_by(otm))
            self.recover_failed_otm(otm)

    def detect_failures(self, lessees) -> List[str]:
        """Expired lessees that still own partitions and are not being recovered"""
        return sorted({otm for otm, _ in lessees if self.owned_by(otm) and otm not in self.recovering})

    def recover_failed_otm(self, failed: str) -> None:
        if failed in self.recovering:
            return
        self.ready.pop(failed, None)
        self.recovering[failed] = None
        logger.info(f"t={self.now} master: recovering {failed} ({self.owned_by(failed)})")
        self.note("RECOVER_START", otm=failed, partitions=self.owned_by(failed))
        self.spawn_otm(lambda replacement: self._recover_onto(failed, replacement))

    def _recover_onto(self, failed: str, replacement: str) -> None:
        self.recovering[failed] = replacement
        pids = self.owned_by(failed)
        if not pids:
            self.recovering.pop(failed, None)
            self.note("RECOVER_DONE", otm=failed, replacement=replacement)
            self._assign_unowned()
            return
        outstanding = {"n": 0}

        def finished(pid: int, ok: bool) -> None:
            self.busy.discard(pid)
            if ok:
                self.note(
                    "RECOVER_END",
                    partition=pid,
                    otm=failed,
                    replacement=replacement,
                    epoch=self.map[pid].ownership_epoch,
                )
            outstanding["n"] -= 1
            if outstanding["n"] == 0:
                self._rescan(failed)

        for pid in pids:
            if pid in self.busy:
                continue
            self.busy.add(pid)
            outstanding["n"] += 1
            self._transfer(pid, replacement, self.map[pid].version, lambda ok, p=pid: finished(p, ok))
        if outstanding["n"] == 0:
            self.after(self.config.detect_interval, self._rescan, failed)

    def _rescan(self, failed: str) -> None:
        """Re-scan after a CAS conflict or a failed open"""
        replacement = self.recovering.get(failed)
        if not self.owned_by(failed):
            self._recover_onto(failed, replacement)
        elif replacement is not None and replacement in self.ready:
            self.after(self._rpc, self._recover_onto, failed, replacement)
        else:
            self.spawn_otm(lambda r: self._recover_onto(failed, r))

    # ---------------------------------------------------
    # Spawn / retire
    # ---------------------------------------------------
    def spawn_otm(self, on_ready: Optional[Callable[[str], None]] = None) -> str:
        node_id = self.kernel.spawn(Role.OTM, self.otm_factory)
        name = str(node_id)
        self.note("SPAWN", otm=name)
        self.pending_spawns[name] = on_ready or (lambda _: None)
        self.after(self.config.lease_duration, self._spawn_timeout, name)
        return name

    def _spawn_timeout(self, name: str) -> None:
        waiter = self.pending_spawns.pop(name, None)
        if waiter is not None:
            logger.warning(f"t={self.now} master: {name} never became ready, spawning again")
            self.spawn_otm(waiter)

    def retire_otm(self, otm: str, on_done: Optional[Done] = None) -> None:
        on_done = on_done or (lambda ok: None)
        owned = self.owned_by(otm)
        if owned:
            self.note("RETIRE_REJECTED", otm=otm, partitions=owned)
            on_done(False)
            return

        def on_reply(reply: Ack) -> None:
            if reply.ok:
                self.ready.pop(otm, None)
                self.note("RETIRE", otm=otm)
            else:
                self.note("RETIRE_REJECTED", otm=otm, reason=reply.reason)
            on_done(reply.ok)

        def on_fail() -> None:
            self.note("RETIRE_REJECTED", otm=otm, reason="unreachable")
            on_done(False)

        self.call(NodeId.parse(otm), Retire(otm=otm), on_reply, timeout=self._rpc, retries=3, on_fail=on_fail)

    # ---------------------------------------------------
    # Migration
    # ---------------------------------------------------
    def execute_migration(self, move: Move, on_done: Optional[Done] = None) -> None:
        on_done = on_done or (lambda ok: None)
        pid, src, dst = move.partition, move.src, move.dst
        entry = self.map.get(pid)
        if pid in self.busy or entry is None or entry.owner != src or dst not in self.ready:
            self.note("MIGRATE_ABORT", partition=pid, src=src, dst=dst, reason="precondition")
            on_done(False)
            return
        self.busy.add(pid)
        self.note("MIGRATE_START", partition=pid, src=src, dst=dst, epoch=entry.ownership_epoch)

        def abort(reason: str, reopen_src: bool) -> None:
            logger.info(f"t={self.now} master: migration of p{pid} aborted ({reason})")
            self.note("MIGRATE_ABORT", partition=pid, src=src, dst=dst, reason=reason)
            if reopen_src and src in self.ready and self.map[pid].owner == src:
                self._transfer(pid, src, self.map[pid].version, lambda ok: finish(False))
                return
            finish(False)

        def finish(ok: bool) -> None:
            self.busy.discard(pid)
            on_done(ok)

        def on_quiesced(reply: QuiesceReply) -> None:
            if not reply.ok:
                abort(f"quiesce refused: {reply.reason}", reopen_src=False)
                return
            self.note("MIGRATE_PHASE1", partition=pid, src=src, handoff_lsn=reply.handoff_lsn)
            self.call(
                METADATA_ID,
                CasAssign(partition=pid, expected_version=entry.version, new_owner=dst),
                on_cas,
                timeout=self._rpc,
            )

        def on_cas(reply: CasReply) -> None:
            self._learn(reply.entry)
            if not reply.ok:
                abort(f"cas: {reply.reason}", reopen_src=True)
                return
            self.note("MIGRATE_PHASE2", partition=pid, dst=dst, epoch=reply.entry.ownership_epoch,
                      version=reply.entry.version)
            self._open(pid, dst, on_open)

        def on_open(ok: bool) -> None:
            self.note("MIGRATE_PHASE3", partition=pid, dst=dst, ok=ok)
            if not ok:
                # dst owns the partition in the map; failure recovery takes over
                abort("open failed", reopen_src=False)
                return
            self.note("MIGRATE_PHASE4", partition=pid, src=src, dst=dst, epoch=self.map[pid].ownership_epoch)
            finish(True)

        self.call(
            NodeId.parse(src),
            Quiesce(partition=pid, epoch=entry.ownership_epoch, target=dst),
            on_quiesced,
            timeout=self.config.drain_timeout + 4 * self._rpc,
            retries=2,
            on_fail=lambda: abort("src unreachable", reopen_src=True),
        )

    # ---------------------------------------------------
    # Elasticity
    # ---------------------------------------------------
    def on_load_report(self, src: NodeId, msg: LoadReport) -> None:
        self.reports.setdefault(msg.window, {})[msg.otm] = dict(msg.per_partition)

    def load_stats(self, window: int) -> LoadStats:
        per_partition = {pid: 0 for pid in self.map}
        for counts in self.reports.get(window, {}).values():
            for pid, n in counts.items():
                per_partition[pid] = per_partition.get(pid, 0) + n
        owners = {pid: e.owner for pid, e in self.map.items() if e.owner is not None}
        return LoadStats.build(per_partition, owners, sorted(self.ready))

    def _plan_tick(self) -> None:
        window = self.now // self.config.stats_window - 1
        self.after(self.config.stats_window, self._plan_tick)
        if not self.config.elastic:
            return
        stats = self.load_stats(window)
        for old in [w for w in self.reports if w <= window]:
            del self.reports[old]
        owners_ready = all(o in self.ready for o in stats.owners.values())
        plan = plan_rebalance(stats, self.config.t_high, self.config.t_low, self.config.min_otms)
        if self.busy or self.recovering or self.pending_spawns or self.plans_in_flight or not owners_ready:
            # the load is still on record for the overload bound
            self.note("PLAN_SKIPPED", window=window, per_otm=stats.per_otm, saturated=plan.saturated)
            return
        self.note(
            "PLAN",
            window=window,
            per_otm=stats.per_otm,
            spawns=plan.spawns,
            moves=[[m.partition, m.src, m.dst] for m in plan.moves],
            retires=plan.retires,
            saturated=plan.saturated,
        )
        if not plan.empty:
            self.execute_plan(plan)

    def execute_plan(self, plan: MigrationPlan) -> None:
        self.plans_in_flight += 1
        names: Dict[str, str] = {}

        def spawned(placeholder: str, otm: str) -> None:
            names[placeholder] = otm
            if len(names) == plan.spawns:
                run_moves()

        def run_moves() -> None:
            moves = [
                Move(partition=m.partition, src=names.get(m.src, m.src), dst=names.get(m.dst, m.dst))
                for m in plan.moves
            ]
            results: Dict[int, bool] = {}
            if not moves:
                run_retires(results)
                return
            for move in moves:
                self.execute_migration(move, lambda ok, m=move: moved(m, ok, results, len(moves)))

        def moved(move: Move, ok: bool, results: Dict[int, bool], total: int) -> None:
            results[move.partition] = ok
            if len(results) == total:
                run_retires(results)

        def run_retires(results: Dict[int, bool]) -> None:
            for otm in plan.retires:
                if all(ok for pid, ok in results.items()):
                    self.retire_otm(otm)
            self.plans_in_flight -= 1

        if plan.spawns:
            for i in range(plan.spawns):
                placeholder = f"{SPAWN_PREFIX}{i}"
                self.spawn_otm(lambda otm, p=placeholder: spawned(p, otm))
        else:
            run_moves()

    # ---------------------------------------------------
    # In-doubt minitransactions
    # ---------------------------------------------------
    def on_resolve_request(self, src: NodeId, msg: ResolveRequest) -> None:
        self.resolve_minitransaction(msg.mtx_id, msg.participants)

    def resolve_minitransaction(self, mtx_id: str, participants: List[int]) -> Optional[Decision]:
        record = self.decisions.get(mtx_id)
        if record is not None:
            self._broadcast(record)
            return record.decision
        if mtx_id in self.resolving:
            return None
        self.resolving[mtx_id] = _Resolution(participants)
        self.note("MTX_RESOLVE_START", mtx=mtx_id, participants=sorted(participants))
        for pid in sorted(participants):
            self._query_vote(mtx_id, pid)
        return None

    def _query_vote(self, mtx_id: str, pid: int) -> None:
        state = self.resolving.get(mtx_id)
        if state is None or pid in state.votes:
            return
        entry = self.map.get(pid)
        if entry is None or entry.owner is None or pid in self.busy:
            self._retry_query(mtx_id, pid)
            return

        def on_reply(reply: VoteReply) -> None:
            if mtx_id not in self.resolving:
                return
            if reply.status != "OK":
                self._refresh_map()
                self._retry_query(mtx_id, pid)
                return
            if reply.decision is not None:
                # a participant already learned the outcome; it is final
                self._record_decision(mtx_id, reply.decision)
                return
            state.votes[pid] = reply.vote
            if len(state.votes) == len(state.participants):
                all_yes = all(v == Vote.YES for v in state.votes.values())
                self._record_decision(mtx_id, Decision.COMMIT if all_yes else Decision.ABORT)

        self.call(
            NodeId.parse(entry.owner),
            QueryVote(mtx_id=mtx_id, partition=pid, epoch=entry.ownership_epoch),
            on_reply,
            timeout=self._rpc,
            retries=2,
            on_fail=lambda: self._retry_query(mtx_id, pid),
        )

    def _retry_query(self, mtx_id: str, pid: int) -> None:
        state = self.resolving.get(mtx_id)
        if state is None:
            return
        delays = state.delays.setdefault(pid, retry_delays(self.kernel.retry_base, self.kernel.retry_cap))
        self.after(next(delays), self._query_vote, mtx_id, pid)

    def _record_decision(self, mtx_id: str, decision: Decision) -> None:
        state = self.resolving.pop(mtx_id, None)
        if mtx_id in self.decisions:
            record = self.decisions[mtx_id]
        else:
            record = MtxDecisionRecord(mtx_id=mtx_id, decision=decision, participants=state.participants)
            self.decisions[mtx_id] = record
            logger.info(f"t={self.now} master: resolved {mtx_id} as {decision.value}")
            self.note("MTX_RESOLVE", mtx=mtx_id, decision=decision.value, participants=record.participants)
        self._broadcast(record)

    def _broadcast(self, record: MtxDecisionRecord) -> None:
        for pid in record.participants:
            entry = self.map.get(pid)
            if entry is not None and entry.owner is not None:
                self.send(
                    NodeId.parse(entry.owner),
                    MtxDecisionMsg(mtx_id=record.mtx_id, partition=pid, decision=record.decision),
                )
