# ---------------------------------------------------
# Higher-level transaction manager
# /services/htm.py
# ---------------------------------------------------
"""Stateless client-facing router and minitransaction coordinator.

The routing cache may be stale; OTM serve guards reject what it gets
wrong and a rejection triggers one refresh before backing off.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

from ..messages import (
    Begin,
    GetMap,
    MapReply,
    Message,
    MtxDecisionMsg,
    MtxReply,
    MtxRound,
    MtxSubmit,
    ReadCommitted,
    ReadOnly,
    ReadOnlyReply,
    TxnOpen,
    TxnOpenReply,
    VoteReply,
)
from ..models import METADATA_ID, Decision, NodeId, PartitionMap, Role, RuntimeConfig, Vote
from ..utils.helpers import retry_delays
from .kernel import Kernel, Node
from .otm import REJECTED

logger = logging.getLogger(__name__)

OnOk = Callable[[Any, str, int], None]


@dataclass
class MtxRoundState:
    mtx_id: str
    fragments: Dict[int, Dict[str, Any]]
    deadline: int
    client: Tuple[NodeId, MtxSubmit]
    votes: Dict[int, Vote] = field(default_factory=dict)
    owners: Dict[int, str] = field(default_factory=dict)
    reads: Dict[str, Optional[str]] = field(default_factory=dict)
    decision: Optional[Decision] = None
    timer: Optional[int] = None


class HigherTransactionManager(Node):
    role = Role.HTM

    def __init__(self, kernel: Kernel, node_id: NodeId, config: RuntimeConfig):
        super().__init__(kernel, node_id)
        self.config = config
        self.cache: Optional[PartitionMap] = None
        self.fetched_at = -1
        self.rounds: Dict[str, MtxRoundState] = {}
        self._waiting: List[Callable[[], None]] = []
        self._fetching = False

    def on_start(self) -> None:
        self.refresh()

    # ---------------------------------------------------
    # Routing cache
    # ---------------------------------------------------
    def refresh(self) -> None:
        if self._fetching:
            return
        self._fetching = True
        self.call(METADATA_ID, GetMap(), self._on_map, timeout=self.config.rpc_timeout)

    def _on_map(self, reply: MapReply) -> None:
        self._fetching = False
        self.cache = PartitionMap(entries=reply.entries)
        self.fetched_at = self.now
        self.note("ROUTE_REFRESH", versions={str(p): e.version for p, e in sorted(reply.entries.items())})
        waiting, self._waiting = self._waiting, []
        for fn in waiting:
            fn()

    def _with_map(self, fn: Callable[[], None], fresh: bool = False) -> None:
        if self.cache is None or fresh:
            self._waiting.append(fn)
            self.refresh()
            return
        if self.now - self.fetched_at >= self.config.route_ttl:
            self.refresh()
        fn()

    def route(self, key: Optional[str] = None, partition: Optional[int] = None) -> Tuple[Optional[str], int, int]:
        """(owner, ownership_epoch, partition) from the cache"""
        entry = self.cache.lookup(key) if partition is None else self.cache.entries[partition]
        return entry.owner, entry.ownership_epoch, entry.partition

    def _routed(
        self,
        partition: int,
        make: Callable[[int], Message],
        on_ok: OnOk,
        on_fail: Callable[[], None],
        deadline: int,
        refreshed: bool = False,
        delays=None,
    ) -> None:
        """Send to the cached owner; refresh once on rejection, then back off"""
        delays = delays or retry_delays(self.kernel.retry_base, self.kernel.retry_cap)
        owner, epoch, _ = self.route(partition=partition)

        def retry(refresh_first: bool) -> None:
            if refresh_first:
                self._with_map(lambda: self._routed(partition, make, on_ok, on_fail, deadline, True, delays), True)
                return
            delay = next(delays)
            if self.now + delay >= deadline:
                on_fail()
                return
            self.after(delay, lambda: self._with_map(
                lambda: self._routed(partition, make, on_ok, on_fail, deadline, refreshed, delays), True
            ))

        if owner is None:
            retry(refresh_first=False)
            return

        def on_reply(reply) -> None:
            if reply.status == REJECTED:
                self.note("REDIRECT", partition=partition, owner=owner, epoch=epoch, hint=reply.hint_owner)
                retry(refresh_first=not refreshed)
                return
            on_ok(reply, owner, epoch)

        timeout = max(1, min(self.config.rpc_timeout, deadline - self.now))
        self.call(
            NodeId.parse(owner),
            make(epoch),
            on_reply,
            timeout=timeout,
            retries=1,
            on_fail=lambda: retry(refresh_first=False),
        )

    # ---------------------------------------------------
    # Interactive transactions
    # ---------------------------------------------------
    def on_txn_open(self, src: NodeId, msg: TxnOpen) -> None:
        def start() -> None:
            try:
                _, _, pid = self.route(key=msg.key)
            except KeyError:
                self.reply(src, msg, TxnOpenReply(status="ERROR", reason=f"no partition for {msg.key}"))
                return

            def on_ok(reply, owner: str, epoch: int) -> None:
                self.reply(
                    src,
                    msg,
                    TxnOpenReply(status=reply.status, partition=pid, owner=owner, epoch=epoch, txn_id=reply.txn_id),
                )

            self._routed(
                pid,
                lambda epoch: Begin(partition=pid, epoch=epoch),
                on_ok,
                lambda: self.reply(src, msg, TxnOpenReply(status="TIMEOUT", partition=pid)),
                msg.deadline,
            )

        self._with_map(start)

    # ---------------------------------------------------
    # Read-only queries
    # ---------------------------------------------------
    def on_read_only(self, src: NodeId, msg: ReadOnly) -> None:
        self._with_map(lambda: self.read_only(src, msg))

    def read_only(self, src: NodeId, msg: ReadOnly) -> None:
        """One committed single-key read per key at its owner; no global snapshot"""
        values: Dict[str, Optional[str]] = {}
        served: Dict[str, Tuple[str, int]] = {}
        state = {"failed": False}
        keys = sorted(set(msg.keys))
        if not keys:
            self.reply(src, msg, ReadOnlyReply(status="OK"))
            return

        try:
            routed = [(key, self.route(key=key)[2]) for key in keys]
        except KeyError as e:
            self.reply(src, msg, ReadOnlyReply(status="ERROR", reason=f"no partition for {e}"))
            return

        def fail() -> None:
            if not state["failed"]:
                state["failed"] = True
                self.reply(src, msg, ReadOnlyReply(status="TIMEOUT"))

        for key, pid in routed:

            def on_ok(reply, owner: str, epoch: int, key=key) -> None:
                if state["failed"]:
                    return
                values[key] = reply.value
                served[key] = (owner, epoch)
                if len(values) == len(keys):
                    self.reply(src, msg, ReadOnlyReply(status="OK", values=values, served_by=served))

            self._routed(
                pid,
                lambda epoch, key=key, pid=pid: ReadCommitted(partition=pid, epoch=epoch, key=key),
                on_ok,
                fail,
                msg.deadline,
            )

    # ---------------------------------------------------
    # Minitransaction coordinator
    # ---------------------------------------------------
    def on_mtx_submit(self, src: NodeId, msg: MtxSubmit) -> None:
        self._with_map(lambda: self.mtx_coordinate(src, msg))

    def split(self, msg: MtxSubmit) -> Dict[int, Dict[str, Any]]:
        fragments: Dict[int, Dict[str, Any]] = {}

        def fragment(key: str) -> Dict[str, Any]:
            _, _, pid = self.route(key=key)
            return fragments.setdefault(pid, {"compares": {}, "reads": [], "writes": {}})

        for key, expected in sorted(msg.compares.items()):
            fragment(key)["compares"][key] = expected
        for key in sorted(set(msg.reads)):
            fragment(key)["reads"].append(key)
        for key, value in sorted(msg.writes.items()):
            fragment(key)["writes"][key] = value
        return dict(sorted(fragments.items()))

    def mtx_coordinate(self, src: NodeId, msg: MtxSubmit) -> None:
        known = self.rounds.get(msg.mtx_id)
        if known is not None:
            if known.decision is not None:
                self._answer_client(known, (src, msg))
            return
        try:
            fragments = self.split(msg)
        except KeyError as e:
            self.reply(src, msg, MtxReply(outcome="ERROR", reason=f"no partition for {e}"))
            return
        state = MtxRoundState(mtx_id=msg.mtx_id, fragments=fragments, deadline=msg.deadline, client=(src, msg))
        participants = sorted(state.fragments)
        self.rounds[msg.mtx_id] = state
        self.note("MTX_BEGIN", mtx=msg.mtx_id, participants=participants)
        state.timer = self.after(max(0, msg.deadline - self.now), self._round_deadline, msg.mtx_id)
        for pid, frag in state.fragments.items():
            self._routed(
                pid,
                lambda epoch, pid=pid, frag=frag: MtxRound(
                    mtx_id=msg.mtx_id,
                    partition=pid,
                    epoch=epoch,
                    compares=frag["compares"],
                    reads=frag["reads"],
                    writes=frag["writes"],
                    participants=participants,
                ),
                lambda reply, owner, epoch, pid=pid: self._on_vote(state, pid, reply, owner),
                lambda: None,
                msg.deadline,
            )

    def _on_vote(self, state: MtxRoundState, pid: int, reply: VoteReply, owner: str) -> None:
        if self.rounds.get(state.mtx_id) is not state or pid in state.votes:
            return
        state.votes[pid] = reply.vote
        state.owners[pid] = owner
        self.note("MTX_VOTE_RECV", mtx=state.mtx_id, partition=pid, vote=reply.vote.value if reply.vote else None)
        if state.decision is not None:
            # late voter: a YES still holds locks until it hears the decision
            if reply.vote == Vote.YES and reply.decision is None:
                self._send_decision(state, pid)
            self._finish(state)
            return
        state.reads.update(reply.reads)
        if reply.decision is not None:
            self._decide(state, reply.decision)
        elif reply.vote != Vote.YES:
            self._decide(state, Decision.ABORT)
        elif len(state.votes) == len(state.fragments):
            self._decide(state, Decision.COMMIT)

    def _decide(self, state: MtxRoundState, decision: Decision) -> None:
        state.decision = decision
        self.note("MTX_DECIDE", mtx=state.mtx_id, decision=decision.value)
        for pid, vote in sorted(state.votes.items()):
            if vote == Vote.YES:
                self._send_decision(state, pid)
        self._answer_client(state, state.client)
        self._finish(state)

    def _send_decision(self, state: MtxRoundState, pid: int) -> None:
        decision_msg = MtxDecisionMsg(mtx_id=state.mtx_id, partition=pid, decision=state.decision)
        self.send(NodeId.parse(state.owners[pid]), decision_msg)
        self.note("MTX_DECISION_SENT", mtx=state.mtx_id, partition=pid, decision=state.decision.value)

    def _answer_client(self, state: MtxRoundState, client: Tuple[NodeId, MtxSubmit]) -> None:
        src, msg = client
        reads = state.reads if state.decision == Decision.COMMIT else {}
        self.reply(src, msg, MtxReply(outcome=state.decision.value, reads=reads))

    def _finish(self, state: MtxRoundState) -> None:
        """Drop a decided round once every participant has voted; the deadline drops the rest"""
        if len(state.votes) < len(state.fragments):
            return
        self.cancel(state.timer)
        del self.rounds[state.mtx_id]

    def _round_deadline(self, mtx_id: str) -> None:
        state = self.rounds.pop(mtx_id, None)
        if state is None or state.decision is not None:
            return
        logger.info(f"t={self.now} {self.name}: {mtx_id} unresolved at deadline")
        self.note("MTX_UNRESOLVED", mtx=mtx_id, votes={str(p): v.value for p, v in sorted(state.votes.items())})
        src, msg = state.client
        self.reply(src, msg, MtxReply(outcome="UNRESOLVED"))
