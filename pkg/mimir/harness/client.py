# ---------------------------------------------------
# Client
# /harness/client.py
# ---------------------------------------------------
"""Closed-loop workload client.

Operations run one at a time. Interactive transactions open through an
HTM and then talk to the owning OTM directly; read-only queries and
minitransactions go through the HTM only.
"""
import logging
from typing import Dict, Iterator, List, Optional

from ..messages import (
    Abort,
    Commit,
    MtxReply,
    MtxSubmit,
    OtmReply,
    Read,
    ReadOnly,
    ReadOnlyReply,
    TxnOpen,
    TxnOpenReply,
    Write,
)
from ..models import NodeId, Role, RuntimeConfig
from ..services.kernel import Kernel, Node
from ..services.otm import REJECTED
from ..utils.helpers import retry_delays
from .scenario import WorkloadSpec
from .workload import MtxOp, Op, ReadOnlyOp, TxnOp

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 3


class LoadBalancer:
    """Round-robin over the live HTMs, shared by all clients"""

    def __init__(self, htms: Optional[List[str]] = None):
        self.htms: List[str] = sorted(htms or [])

    def add(self, htm: str) -> None:
        if htm not in self.htms:
            self.htms.append(htm)
            self.htms.sort()

    def remove(self, htm: str) -> None:
        if htm in self.htms:
            self.htms.remove(htm)

    def pick(self, turn: int) -> Optional[str]:
        if not self.htms:
            return None
        return self.htms[turn % len(self.htms)]


class Client(Node):
    role = Role.CLIENT

    def __init__(
        self,
        kernel: Kernel,
        node_id: NodeId,
        config: RuntimeConfig,
        ops: Iterator[Op],
        balancer: LoadBalancer,
        spec: WorkloadSpec,
        limit: Optional[int] = None,
    ):
        super().__init__(kernel, node_id)
        self.config = config
        self.ops = ops
        self.balancer = balancer
        self.spec = spec
        self.limit = limit
        self.issued = 0
        self.turn = 0
        self.seen: Dict[str, Optional[str]] = {}
        self.next_at = spec.start + node_id.index

    def on_start(self) -> None:
        self.after(max(0, self.next_at - self.now), self._next)

    # ---------------------------------------------------
    # Pacing
    # ---------------------------------------------------
    def _next(self) -> None:
        if self.limit is not None and self.issued >= self.limit:
            self.note("CLIENT_DONE", issued=self.issued)
            return
        rate = self.spec.rate_at(self.now)
        if rate <= 0:
            upcoming = sorted(p.at for p in self.spec.phases if p.at > self.now)
            if upcoming:
                self.after(upcoming[0] - self.now, self._next)
            return
        interval = max(1, int(self.config.stats_window * max(1, self.spec.clients) / rate))
        self.next_at = self.now + interval
        op = next(self.ops)
        self.issued += 1
        self.run(op, self.issued, self.now)

    def _done(self) -> None:
        self.after(max(0, self.next_at - self.now), self._next)

    def _htm(self) -> Optional[NodeId]:
        htm = self.balancer.pick(self.turn)
        self.turn += 1
        return NodeId.parse(htm) if htm else None

    def run(self, op: Op, op_no: int, started: int) -> None:
        if isinstance(op, TxnOp):
            self._txn(op, op_no, 1, started, retry_delays(self.kernel.retry_base, self.kernel.retry_cap))
        elif isinstance(op, ReadOnlyOp):
            self._read_only(op, started)
        elif isinstance(op, MtxOp):
            self._mtx(op, op_no, started)

    # ---------------------------------------------------
    # Interactive transactions
    # ---------------------------------------------------
    def _txn(self, op: TxnOp, op_no: int, attempt: int, started: int, delays) -> None:
        htm = self._htm()
        if htm is None:
            self.after(self.config.rpc_timeout, self._txn, op, op_no, attempt, started, delays)
            return
        deadline = self.now + self.config.client_deadline
        state = {"partition": -1, "txn": "", "owner": None, "epoch": 0}

        def finish(outcome: str) -> None:
            self.note(
                "TXN_DONE",
                outcome=outcome,
                latency=self.now - started,
                partition=state["partition"],
                txn=state["txn"],
                attempts=attempt,
            )
            self._done()

        def retry_or_finish(outcome: str) -> None:
            if attempt >= MAX_ATTEMPTS:
                finish(outcome)
                return
            self.after(next(delays), self._txn, op, op_no, attempt + 1, started, delays)

        def timed_out() -> None:
            if state["owner"] is not None:
                abort = Abort(partition=state["partition"], epoch=state["epoch"], txn_id=state["txn"])
                self.send(state["owner"], abort)
            finish("TIMEOUT")

        def on_step(reply: OtmReply, index: int) -> None:
            if reply.status == "OK":
                step = op.steps[index] if index < len(op.steps) else None
                if step is not None and step.action == "read":
                    self.seen[step.key] = reply.value
                if index == len(op.steps):
                    for i, s in enumerate(op.steps):
                        if s.action == "write":
                            self.seen[s.key] = f"{self.name}.{op_no}.{attempt}.{i}"
                    finish("COMMITTED")
                    return
                send_step(index + 1)
            elif reply.status == REJECTED:
                retry_or_finish("REJECTED")
            elif reply.status == "ABORTED" and reply.retryable:
                retry_or_finish("ABORTED")
            else:
                finish("ABORTED")

        def send_step(index: int) -> None:
            base = {"partition": state["partition"], "epoch": state["epoch"], "txn_id": state["txn"]}
            if index == len(op.steps):
                msg = Commit(**base)
                timeout, retries = self.config.rpc_timeout, 2
            else:
                step = op.steps[index]
                if step.action == "read":
                    msg = Read(key=step.key, **base)
                else:
                    msg = Write(key=step.key, value=f"{self.name}.{op_no}.{attempt}.{index}", **base)
                # no retransmission: a duplicate could queue twice behind a lock
                timeout, retries = max(1, deadline - self.now), 0
            self.call(
                state["owner"], msg, lambda r: on_step(r, index), timeout=timeout, retries=retries, on_fail=timed_out
            )

        def on_open(reply: TxnOpenReply) -> None:
            if reply.status != "OK":
                retry_or_finish("TIMEOUT" if reply.status == "TIMEOUT" else "REJECTED")
                return
            state.update(
                partition=reply.partition, txn=reply.txn_id, owner=NodeId.parse(reply.owner), epoch=reply.epoch
            )
            send_step(0)

        self.call(
            htm,
            TxnOpen(key=op.steps[0].key, deadline=deadline),
            on_open,
            timeout=self.config.client_deadline + self.config.rpc_timeout,
            retries=0,
            on_fail=lambda: finish("TIMEOUT"),
        )

    # ---------------------------------------------------
    # Read-only queries
    # ---------------------------------------------------
    def _read_only(self, op: ReadOnlyOp, started: int) -> None:
        htm = self._htm()
        if htm is None:
            self.after(self.config.rpc_timeout, self._read_only, op, started)
            return

        def finish(outcome: str) -> None:
            self.note("RO_DONE", outcome=outcome, latency=self.now - started, keys=len(set(op.keys)))
            self._done()

        def on_reply(reply: ReadOnlyReply) -> None:
            if reply.status == "OK":
                self.seen.update(reply.values)
            finish(reply.status)

        self.call(
            htm,
            ReadOnly(keys=op.keys, deadline=self.now + self.config.client_deadline),
            on_reply,
            timeout=self.config.client_deadline + self.config.rpc_timeout,
            retries=0,
            on_fail=lambda: finish("TIMEOUT"),
        )

    # ---------------------------------------------------
    # Minitransactions
    # ---------------------------------------------------
    def _mtx(self, op: MtxOp, op_no: int, started: int) -> None:
        htm = self._htm()
        if htm is None:
            self.after(self.config.rpc_timeout, self._mtx, op, op_no, started)
            return
        mtx_id = f"{self.name}-{op_no}"
        writes = {key: f"{self.name}.{op_no}.m{i}" for i, key in enumerate(op.writes)}

        def finish(outcome: str) -> None:
            self.note("MTX_DONE", mtx=mtx_id, outcome=outcome, latency=self.now - started)
            self._done()

        def on_reply(reply: MtxReply) -> None:
            if reply.outcome == "COMMIT":
                self.seen.update(reply.reads)
                self.seen.update(writes)
            finish(reply.outcome)

        self.call(
            htm,
            MtxSubmit(
                mtx_id=mtx_id,
                compares={key: self.seen.get(key) for key in op.compares},
                reads=op.reads,
                writes=writes,
                deadline=self.now + self.config.client_deadline,
            ),
            on_reply,
            timeout=self.config.client_deadline + self.config.rpc_timeout,
            retries=0,
            on_fail=lambda: finish("TIMEOUT"),
        )
