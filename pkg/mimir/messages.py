"""Wire schemas carried over Kernel.send.

Requests carry a req_id that the matching reply echoes.
"""
from typing import ClassVar, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field

from .models import Decision, KeyRange, Lease, PartitionEntry, Vote


class Message(BaseModel):
    is_reply: ClassVar[bool] = False
    req_id: str = ""


class Reply(Message):
    is_reply: ClassVar[bool] = True


class Ack(Reply):
    ok: bool = True
    reason: str = ""


# ---------------------------------------------------
# Metadata manager
# ---------------------------------------------------
class AcquireLease(Message):
    otm: str


class RenewLease(Message):
    otm: str
    epoch: int


class ReleaseLease(Message):
    otm: str
    epoch: int


class CasAssign(Message):
    partition: int
    expected_version: int
    new_owner: str


class GetMap(Message):
    pass


class ExpiredLessees(Message):
    pass


class LeaseReply(Reply):
    granted: bool
    lease: Optional[Lease] = None
    reason: str = ""


class CasReply(Reply):
    ok: bool
    entry: Optional[PartitionEntry] = None
    reason: str = ""


class MapReply(Reply):
    entries: Dict[int, PartitionEntry]


class ExpiredReply(Reply):
    lessees: List[Tuple[str, int]]


# ---------------------------------------------------
# Master <-> OTM
# ---------------------------------------------------
class OtmReady(Message):
    otm: str
    lease_epoch: int
    partitions: List[int] = Field(default_factory=list)


class OpenPartition(Message):
    partition: int
    epoch: int
    volume: str
    key_range: KeyRange


class OpenReply(Reply):
    ok: bool
    keys: int = 0
    in_doubt: List[str] = Field(default_factory=list)
    reason: str = ""


class Quiesce(Message):
    partition: int
    epoch: int
    target: str


class QuiesceReply(Reply):
    ok: bool
    handoff_lsn: int = -1
    reason: str = ""


class Retire(Message):
    otm: str


class LoadReport(Message):
    otm: str
    window: int
    per_partition: Dict[int, int]


class ResolveRequest(Message):
    mtx_id: str
    participants: List[int]
    partition: int


class QueryVote(Message):
    mtx_id: str
    partition: int
    epoch: int


class VoteReply(Reply):
    status: str = "OK"
    vote: Optional[Vote] = None
    decision: Optional[Decision] = None
    reads: Dict[str, Optional[str]] = Field(default_factory=dict)
    hint_owner: Optional[str] = None
    hint_epoch: int = 0


class MtxDecisionMsg(Message):
    mtx_id: str
    partition: int
    decision: Decision


# ---------------------------------------------------
# OTM transactions
# ---------------------------------------------------
class Begin(Message):
    partition: int
    epoch: int


class Read(Message):
    partition: int
    epoch: int
    txn_id: str
    key: str


class Write(Message):
    partition: int
    epoch: int
    txn_id: str
    key: str
    value: str


class Commit(Message):
    partition: int
    epoch: int
    txn_id: str


class Abort(Message):
    partition: int
    epoch: int
    txn_id: str


class ReadCommitted(Message):
    partition: int
    epoch: int
    key: str


class MtxRound(Message):
    mtx_id: str
    partition: int
    epoch: int
    compares: Dict[str, Optional[str]] = Field(default_factory=dict)
    reads: List[str] = Field(default_factory=list)
    writes: Dict[str, str] = Field(default_factory=dict)
    participants: List[int]


class OtmReply(Reply):
    status: str
    txn_id: str = ""
    value: Optional[str] = None
    lsn: int = -1
    hint_owner: Optional[str] = None
    hint_epoch: int = 0
    reason: str = ""
    retryable: bool = False


# ---------------------------------------------------
# Client <-> HTM
# ---------------------------------------------------
class TxnOpen(Message):
    key: str
    deadline: int


class TxnOpenReply(Reply):
    status: str
    partition: int = -1
    owner: Optional[str] = None
    epoch: int = 0
    txn_id: str = ""
    reason: str = ""


class ReadOnly(Message):
    keys: List[str]
    deadline: int


class ReadOnlyReply(Reply):
    status: str
    values: Dict[str, Optional[str]] = Field(default_factory=dict)
    served_by: Dict[str, Tuple[str, int]] = Field(default_factory=dict)
    reason: str = ""


class MtxSubmit(Message):
    mtx_id: str
    compares: Dict[str, Optional[str]] = Field(default_factory=dict)
    reads: List[str] = Field(default_factory=list)
    writes: Dict[str, str] = Field(default_factory=dict)
    deadline: int


class MtxReply(Reply):
    outcome: str
    reads: Dict[str, Optional[str]] = Field(default_factory=dict)
    reason: str = ""
