"""Deterministic discrete-event substrate.

Simulated time, lossy reordering message delivery, node crash/restart,
crash-surviving volumes and the global trace every checker reads.
"""
import heapq
import itertools
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Optional, Set, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from ..models import NodeId, Role
from ..utils.helpers import retry_delays, stable_dumps
from .storage import DurableVolume

logger = logging.getLogger(__name__)


class MimirError(Exception):
    """Base class for every error raised by the store"""


class ConfigurationError(MimirError):
    pass


class FencingError(MimirError):
    """A volume operation from a node that no longer holds the volume"""


class NodeCrashed(MimirError):
    """Unwinds the handler of a node that crashed while it was running"""


class SimulationAborted(MimirError):
    def __init__(self, message: str, trace: List["TraceEvent"]):
        super().__init__(message)
        self.trace = trace


class NetworkConfig(BaseModel):
    min_delay: int = Field(default=1, ge=0)
    max_delay: int = Field(default=10, ge=0)
    drop_probability: float = Field(default=0.0, ge=0.0, le=1.0)
    partition_sets: List[List[str]] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_sets(self):
        if self.min_delay > self.max_delay:
            raise ValueError("min_delay must not exceed max_delay")
        seen: Set[str] = set()
        for group in self.partition_sets:
            overlap = seen.intersection(group)
            if overlap:
                raise ValueError(f"partition sets overlap on {sorted(overlap)}")
            seen.update(group)
        return self

    def group_of(self, node: str) -> Optional[int]:
        for i, group in enumerate(self.partition_sets):
            if node in group:
                return i
        return None

    def blocked(self, src: str, dst: str) -> bool:
        # nodes listed in no set keep talking to everyone
        a, b = self.group_of(src), self.group_of(dst)
        return a is not None and b is not None and a != b


class TraceKind(str, Enum):
    SEND = "SEND"
    DELIVER = "DELIVER"
    DROP = "DROP"
    CRASH = "CRASH"
    RESTART = "RESTART"
    VOLUME_APPEND = "VOLUME_APPEND"
    LOCAL = "LOCAL"


@dataclass
class TraceEvent:
    seq: int
    time: int
    node: str
    kind: TraceKind
    payload: Dict[str, Any] = field(default_factory=dict)

    @property
    def event(self) -> Optional[str]:
        return self.payload.get("event")

    def to_line(self) -> str:
        # field order is part of the format; only the payload is key-sorted
        return (
            f'{{"seq":{self.seq},"time":{self.time},"node":"{self.node}",'
            f'"kind":"{self.kind.value}","payload":{stable_dumps(self.payload)}}}'
        )

    @classmethod
    def from_line(cls, line: str) -> "TraceEvent":
        raw = json.loads(line)
        return cls(
            seq=raw["seq"],
            time=raw["time"],
            node=raw["node"],
            kind=TraceKind(raw["kind"]),
            payload=raw["payload"],
        )


def dump_trace(trace: Iterable[TraceEvent]) -> str:
    return "".join(event.to_line() + "\n" for event in trace)


def load_trace(text: str) -> List[TraceEvent]:
    return [TraceEvent.from_line(line) for line in text.splitlines() if line.strip()]


_CAMEL = re.compile(r"(?<!^)(?=[A-Z])")


class Node:
    """Base class of every simulated node.

    Instances hold only volatile state: a crash drops the object and a
    restart builds a fresh one from the registered factory.
    """

    role: Role

    def __init__(self, kernel: "Kernel", node_id: NodeId):
        self.kernel = kernel
        self.id = node_id
        self.name = str(node_id)
        self._pending: Dict[str, "_PendingCall"] = {}

    @property
    def now(self) -> int:
        return self.kernel.now

    def local_now(self) -> int:
        """This node's view of time, skewed by the scenario's clock_skew"""
        return self.kernel.now + self.kernel.clock_skew.get(self.name, 0)

    def on_start(self) -> None:
        """Boot and recovery entry point, run on spawn and on every restart"""

    def on_timer(self, payload: Any) -> None:
        if callable(payload):
            payload()

    def after(self, delay: int, fn: Callable, *args, **kwargs) -> int:
        if args or kwargs:
            return self.kernel.schedule(self.id, delay, lambda: fn(*args, **kwargs))
        return self.kernel.schedule(self.id, delay, fn)

    def cancel(self, event_id: Optional[int]) -> None:
        if event_id is not None:
            self.kernel.cancel(event_id)

    def send(self, dst: NodeId, msg: BaseModel) -> None:
        self.kernel.send(self.id, dst, msg)

    def note(self, event: str, **payload: Any) -> int:
        payload["event"] = event
        return self.kernel.record(self.id, TraceKind.LOCAL, payload)

    def receive(self, src: NodeId, msg: BaseModel) -> None:
        req_id = getattr(msg, "req_id", None)
        if getattr(msg, "is_reply", False):
            call = self._pending.pop(req_id, None)
            if call is None:
                logger.debug(f"t={self.now} {self.name}: late reply {req_id} dropped")
                return
            self.cancel(call.timer)
            call.on_reply(msg)
            return
        name = "on_" + _CAMEL.sub("_", type(msg).__name__).lower()
        handler = getattr(self, name, None)
        if handler is None:
            logger.warning(f"t={self.now} {self.name}: no handler for {type(msg).__name__}")
            return
        handler(src, msg)

    def reply(self, dst: NodeId, request: BaseModel, response: BaseModel) -> None:
        response.req_id = request.req_id
        self.send(dst, response)

    def call(
        self,
        dst: NodeId,
        msg: BaseModel,
        on_reply: Callable[[BaseModel], None],
        timeout: int,
        retries: Optional[int] = None,
        on_fail: Optional[Callable[[], None]] = None,
    ) -> str:
        """Request/response over the lossy network with retransmission.

        The same request id is reused for every retransmission, so the
        receiver sees duplicates of one logical request.
        """
        req_id = f"{self.name}-{next(self.kernel.rpc_ids)}"
        msg.req_id = req_id
        call = _PendingCall(
            dst=dst,
            msg=msg,
            on_reply=on_reply,
            on_fail=on_fail,
            timeout=timeout,
            retries=retries,
            delays=retry_delays(self.kernel.retry_base, self.kernel.retry_cap),
        )
        self._pending[req_id] = call
        self._transmit(req_id)
        return req_id

    def abandon(self, req_id: str) -> None:
        call = self._pending.pop(req_id, None)
        if call is not None:
            self.cancel(call.timer)

    def _transmit(self, req_id: str) -> None:
        call = self._pending.get(req_id)
        if call is None:
            return
        self.send(call.dst, call.msg)
        call.timer = self.after(call.timeout, self._expire, req_id)

    def _expire(self, req_id: str) -> None:
        call = self._pending.get(req_id)
        if call is None:
            return
        call.attempts += 1
        if call.retries is not None and call.attempts > call.retries:
            del self._pending[req_id]
            if call.on_fail is not None:
                call.on_fail()
            return
        call.timer = self.after(next(call.delays), self._transmit, req_id)


@dataclass
class _PendingCall:
    dst: NodeId
    msg: BaseModel
    on_reply: Callable
    on_fail: Optional[Callable]
    timeout: int
    retries: Optional[int]
    delays: Any
    attempts: int = 0
    timer: Optional[int] = None


@dataclass(order=True)
class _Queued:
    time: int
    seq: int
    kind: str = field(compare=False)
    node: Optional[NodeId] = field(compare=False, default=None)
    incarnation: int = field(compare=False, default=0)
    payload: Any = field(compare=False, default=None)
    src: Optional[NodeId] = field(compare=False, default=None)
    msg_id: int = field(compare=False, default=0)


NodeFactory = Callable[["Kernel", NodeId], Node]


class Kernel:
    def __init__(
        self,
        network: Optional[NetworkConfig] = None,
        seed: int = 0,
        clock_skew: Optional[Dict[str, int]] = None,
        retry_base: int = 20,
        retry_cap: int = 2000,
    ):
        self.network = network or NetworkConfig()
        self.rng = np.random.default_rng(seed)
        self.clock_skew = dict(clock_skew or {})
        self.retry_base = retry_base
        self.retry_cap = retry_cap
        self.now = 0
        self.trace: List[TraceEvent] = []
        self.volumes: Dict[str, DurableVolume] = {}
        self._queue: List[_Queued] = []
        self._seq = itertools.count()
        self._msg_seq = itertools.count()
        # request ids stay unique across restarts of the same node
        self.rpc_ids = itertools.count()
        self._cancelled: Set[int] = set()
        self._factories: Dict[NodeId, NodeFactory] = {}
        self._nodes: Dict[NodeId, Optional[Node]] = {}
        self._incarnation: Dict[NodeId, int] = {}
        self._halted: Set[NodeId] = set()
        self._listeners: List[Callable[[TraceEvent], None]] = []
        self._current: Optional[NodeId] = None

    # ---------------------------------------------------
    # Nodes
    # ---------------------------------------------------
    def add_node(self, node_id: NodeId, factory: NodeFactory) -> None:
        if node_id in self._factories:
            raise ConfigurationError(f"duplicate node {node_id}")
        self._factories[node_id] = factory
        self._incarnation[node_id] = 0
        self._nodes[node_id] = factory(self, node_id)
        self._enqueue("start", node=node_id, incarnation=0)

    def spawn(self, role: Role, factory: NodeFactory) -> NodeId:
        index = 1 + max((n.index for n in self._factories if n.role == role), default=-1)
        node_id = NodeId(role, index)
        self.add_node(node_id, factory)
        self.record(node_id, TraceKind.LOCAL, {"event": "NODE_SPAWNED"})
        return node_id

    def node(self, node_id: NodeId) -> Optional[Node]:
        return self._nodes.get(node_id)

    def nodes(self, role: Optional[Role] = None) -> List[NodeId]:
        return sorted(n for n in self._factories if role is None or n.role == role)

    def is_alive(self, node_id: NodeId) -> bool:
        return self._nodes.get(node_id) is not None

    def crash_node(self, node_id: NodeId) -> None:
        self._require(node_id)
        if not self.is_alive(node_id):
            self.record(node_id, TraceKind.LOCAL, {"event": "CRASH_NOOP"})
            return
        self._nodes[node_id] = None
        self._incarnation[node_id] += 1
        for volume in self.volumes.values():
            volume.detach(str(node_id))
        logger.info(f"t={self.now} crash {node_id}")
        self.record(node_id, TraceKind.CRASH, {})
        if self._current == node_id:
            raise NodeCrashed(str(node_id))

    def restart_node(self, node_id: NodeId) -> None:
        self._require(node_id)
        if self.is_alive(node_id) or node_id in self._halted:
            return
        self._nodes[node_id] = self._factories[node_id](self, node_id)
        logger.info(f"t={self.now} restart {node_id}")
        self.record(node_id, TraceKind.RESTART, {})
        self._enqueue("start", node=node_id, incarnation=self._incarnation[node_id])

    def halt_node(self, node_id: NodeId) -> None:
        """Stop a node for good (retirement); unlike a crash it never restarts"""
        self._require(node_id)
        self._halted.add(node_id)
        if not self.is_alive(node_id):
            return
        self.record(node_id, TraceKind.LOCAL, {"event": "HALTED"})
        self._nodes[node_id] = None
        self._incarnation[node_id] += 1
        for volume in self.volumes.values():
            volume.detach(str(node_id))
        if self._current == node_id:
            raise NodeCrashed(str(node_id))

    def _require(self, node_id: NodeId) -> None:
        if node_id not in self._factories:
            raise ConfigurationError(f"unknown node {node_id}")

    # ---------------------------------------------------
    # Events
    # ---------------------------------------------------
    def schedule(self, node_id: NodeId, delay: int, payload: Any) -> int:
        self._require(node_id)
        if delay < 0:
            raise ConfigurationError(f"negative delay {delay}")
        return self._enqueue(
            "timer",
            delay=delay,
            node=node_id,
            incarnation=self._incarnation[node_id],
            payload=payload,
        )

    def call_at(self, time: int, fn: Callable[[], None]) -> int:
        """Kernel-level action (fault injection, harness hooks), owned by no node"""
        return self._enqueue("action", delay=max(0, time - self.now), payload=fn)

    def cancel(self, event_id: int) -> None:
        self._cancelled.add(event_id)

    def _enqueue(self, kind: str, delay: int = 0, **fields) -> int:
        seq = next(self._seq)
        heapq.heappush(self._queue, _Queued(self.now + delay, seq, kind, **fields))
        return seq

    def send(self, src: NodeId, dst: NodeId, msg: BaseModel) -> None:
        self._require(src)
        self._require(dst)
        msg_id = next(self._msg_seq)
        kind = type(msg).__name__
        self.record(
            src,
            TraceKind.SEND,
            {"dst": str(dst), "msg_id": msg_id, "type": kind, "body": msg.model_dump(mode="json")},
        )
        if self.network.blocked(str(src), str(dst)):
            self.record(src, TraceKind.DROP, {"dst": str(dst), "msg_id": msg_id, "reason": "partitioned"})
            return
        if self.network.drop_probability > 0 and self.rng.random() < self.network.drop_probability:
            self.record(src, TraceKind.DROP, {"dst": str(dst), "msg_id": msg_id, "reason": "lost"})
            return
        delay = int(self.rng.integers(self.network.min_delay, self.network.max_delay + 1))
        self._enqueue("deliver", delay=delay, node=dst, src=src, payload=msg, msg_id=msg_id)

    def record(self, node_id: Union[NodeId, str], kind: TraceKind, payload: Dict[str, Any]) -> int:
        event = TraceEvent(len(self.trace), self.now, str(node_id), kind, payload)
        self.trace.append(event)
        for listener in list(self._listeners):
            listener(event)
        return event.seq

    def subscribe(self, listener: Callable[[TraceEvent], None]) -> None:
        self._listeners.append(listener)

    def run_until(self, until: Optional[int] = None) -> List[TraceEvent]:
        """Process events in (time, seq) order up to `until` or quiescence"""
        while self._queue:
            item = self._queue[0]
            if until is not None and item.time > until:
                break
            heapq.heappop(self._queue)
            if item.seq in self._cancelled:
                self._cancelled.discard(item.seq)
                continue
            self.now = item.time
            try:
                self._dispatch(item)
            except NodeCrashed:
                pass
            except Exception as e:
                logger.error(f"t={self.now} handler failure on {item.node}: {e}", exc_info=True)
                raise SimulationAborted(f"handler failure at t={self.now}: {e}", self.trace) from e
            finally:
                self._current = None
        if until is not None:
            self.now = max(self.now, until)
        return self.trace

    def _dispatch(self, item: _Queued) -> None:
        if item.kind == "action":
            item.payload()
            return
        node = self._nodes.get(item.node)
        if node is None:
            return
        if item.kind == "deliver":
            self._current = item.node
            self.record(item.node, TraceKind.DELIVER, {"src": str(item.src), "msg_id": item.msg_id})
            node.receive(item.src, item.payload)
            return
        if item.incarnation != self._incarnation[item.node]:
            return
        self._current = item.node
        if item.kind == "start":
            node.on_start()
        else:
            node.on_timer(item.payload)

    # ---------------------------------------------------
    # Volumes
    # ---------------------------------------------------
    def create_volume(self, volume_id: str) -> DurableVolume:
        if volume_id not in self.volumes:
            self.volumes[volume_id] = DurableVolume(volume_id)
        return self.volumes[volume_id]

    def attach_volume(self, volume_id: str, node_id: NodeId, epoch: int) -> None:
        volume = self.create_volume(volume_id)
        try:
            previous = volume.attach(str(node_id), epoch)
        except ValueError as e:
            self.record(node_id, TraceKind.LOCAL, {"event": "ATTACH_REJECTED", "volume": volume_id, "epoch": epoch})
            raise FencingError(str(e)) from e
        self.record(
            node_id,
            TraceKind.LOCAL,
            {"event": "ATTACH", "volume": volume_id, "epoch": epoch, "fenced": previous},
        )

    def detach_volume(self, volume_id: str, node_id: NodeId) -> None:
        volume = self.volumes.get(volume_id)
        if volume is not None and volume.detach(str(node_id)):
            self.record(node_id, TraceKind.LOCAL, {"event": "DETACH", "volume": volume_id})

    def volume_append(self, volume_id: str, node_id: NodeId, record: bytes, epoch: int) -> int:
        volume = self._volume(volume_id)
        try:
            lsn = volume.append(str(node_id), record, epoch)
        except ValueError as e:
            self.record(
                node_id,
                TraceKind.LOCAL,
                {"event": "APPEND_REJECTED", "volume": volume_id, "epoch": epoch},
            )
            raise FencingError(str(e)) from e
        self.record(
            node_id,
            TraceKind.VOLUME_APPEND,
            {"volume": volume_id, "lsn": lsn, "epoch": epoch, "size": len(record)},
        )
        return lsn

    def volume_read(self, volume_id: str, node_id: NodeId) -> List[bytes]:
        try:
            return self._volume(volume_id).read(str(node_id))
        except ValueError as e:
            raise FencingError(str(e)) from e

    def volume_truncate(self, volume_id: str, node_id: NodeId, epoch: int, lsn: int) -> None:
        try:
            self._volume(volume_id).truncate(str(node_id), epoch, lsn)
        except ValueError as e:
            raise FencingError(str(e)) from e
        self.record(node_id, TraceKind.LOCAL, {"event": "TRUNCATE", "volume": volume_id, "lsn": lsn})

    def _volume(self, volume_id: str) -> DurableVolume:
        try:
            return self.volumes[volume_id]
        except KeyError:
            raise ConfigurationError(f"unknown volume {volume_id}") from None
