# ---------------------------------------------------
# Write-ahead log
# /services/wal.py
# ---------------------------------------------------
"""Log records of one partition and the redo-only replay used by recovery.

Wire format per record: 4-byte big-endian body length, 4-byte CRC32 of the
body, then the body: a JSON array with the fixed field order
[kind, id, epoch, data]. A record whose length or checksum does not match
is a torn write and ends the readable log.
"""
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from ..models import Decision, Vote
from ..utils.helpers import stable_dumps
from .kernel import MimirError

logger = logging.getLogger(__name__)

HEADER = struct.Struct(">II")


class TornRecordError(MimirError):
    pass


class LogKind(str, Enum):
    BEGIN = "BEGIN"
    UPDATE = "UPDATE"
    COMMIT = "COMMIT"
    ABORT = "ABORT"
    CHECKPOINT = "CHECKPOINT"
    MTX_VOTE = "MTX_VOTE"
    MTX_DECISION = "MTX_DECISION"
    HANDOFF = "HANDOFF"


@dataclass
class LogRecord:
    kind: LogKind
    id: str
    epoch: int
    data: Dict[str, Any] = field(default_factory=dict)
    lsn: int = -1

    def encode(self) -> bytes:
        body = stable_dumps([self.kind.value, self.id, self.epoch, self.data]).encode()
        return HEADER.pack(len(body), zlib.crc32(body)) + body

    @classmethod
    def decode(cls, raw: bytes, lsn: int = -1) -> "LogRecord":
        if len(raw) < HEADER.size:
            raise TornRecordError(f"record {lsn}: short header")
        length, crc = HEADER.unpack_from(raw)
        body = raw[HEADER.size:]
        if len(body) != length or zlib.crc32(body) != crc:
            raise TornRecordError(f"record {lsn}: length/checksum mismatch")
        kind, rec_id, epoch, data = json.loads(body.decode())
        return cls(LogKind(kind), rec_id, epoch, data, lsn)


@dataclass
class VoteRecord:
    """What a participant durably knows about one minitransaction"""

    vote: Optional[Vote] = None
    decision: Optional[Decision] = None
    keys: Dict[str, str] = field(default_factory=dict)
    writes: Dict[str, str] = field(default_factory=dict)
    reads: Dict[str, Optional[str]] = field(default_factory=dict)
    participants: List[int] = field(default_factory=list)
    # tick the outcome became final here; None until then, or when only replay knows it
    settled_at: Optional[int] = None

    @property
    def in_doubt(self) -> bool:
        return self.vote == Vote.YES and self.decision is None

    @property
    def settled(self) -> bool:
        return self.vote == Vote.NO or self.decision is not None

    def to_json(self) -> Dict[str, Any]:
        return {
            "vote": self.vote.value if self.vote else None,
            "decision": self.decision.value if self.decision else None,
            "keys": self.keys,
            "writes": self.writes,
            "reads": self.reads,
            "participants": self.participants,
            "settled_at": self.settled_at,
        }

    @classmethod
    def from_json(cls, raw: Dict[str, Any]) -> "VoteRecord":
        return cls(
            vote=Vote(raw["vote"]) if raw.get("vote") else None,
            decision=Decision(raw["decision"]) if raw.get("decision") else None,
            keys=dict(raw.get("keys", {})),
            writes=dict(raw.get("writes", {})),
            reads=dict(raw.get("reads", {})),
            participants=list(raw.get("participants", [])),
            settled_at=raw.get("settled_at"),
        )


@dataclass
class Replayed:
    committed: Dict[str, str]
    votes: Dict[str, VoteRecord]
    last_checkpoint_lsn: int = -1
    torn_at: Optional[int] = None
    handoff_lsn: Optional[int] = None
    records: int = 0

    @property
    def in_doubt(self) -> List[str]:
        return sorted(m for m, v in self.votes.items() if v.in_doubt)


def decode_log(raw_records: List[bytes]) -> Tuple[List[LogRecord], Optional[int]]:
    """Decode records up to the first torn one; returns (records, torn_lsn)"""
    decoded = []
    for lsn, raw in enumerate(raw_records):
        try:
            decoded.append(LogRecord.decode(raw, lsn))
        except (TornRecordError, ValueError) as e:
            logger.warning(f"discarding torn log tail at lsn {lsn}: {e}")
            return decoded, lsn
    return decoded, None


def replay(raw_records: List[bytes]) -> Replayed:
    """Redo committed work only: snapshot at the last checkpoint, then the
    UPDATEs of every transaction whose COMMIT (or COMMIT decision) follows.
    """
    records, torn_at = decode_log(raw_records)

    start = 0
    committed: Dict[str, str] = {}
    votes: Dict[str, VoteRecord] = {}
    last_checkpoint = -1
    for record in reversed(records):
        if record.kind == LogKind.CHECKPOINT:
            committed = dict(record.data["state"])
            votes = {m: VoteRecord.from_json(v) for m, v in record.data["votes"].items()}
            last_checkpoint = record.lsn
            start = record.lsn + 1
            break

    pending: Dict[str, Dict[str, str]] = {}
    handoff = None
    for record in records[start:]:
        if record.kind == LogKind.UPDATE:
            pending.setdefault(record.id, {})[record.data["key"]] = record.data["value"]
        elif record.kind == LogKind.COMMIT:
            committed.update(pending.pop(record.id, {}))
        elif record.kind == LogKind.ABORT:
            pending.pop(record.id, None)
        elif record.kind == LogKind.MTX_VOTE:
            vote = votes.setdefault(record.id, VoteRecord())
            if vote.vote is None:
                vote.vote = Vote(record.data["vote"])
                vote.keys = dict(record.data.get("keys", {}))
                vote.writes = dict(record.data.get("writes", {}))
                vote.reads = dict(record.data.get("reads", {}))
                vote.participants = list(record.data.get("participants", []))
        elif record.kind == LogKind.MTX_DECISION:
            vote = votes.setdefault(record.id, VoteRecord())
            writes = pending.pop(record.id, {})
            if vote.decision is None:
                vote.decision = Decision(record.data["decision"])
                if vote.decision == Decision.COMMIT:
                    committed.update(writes)
        elif record.kind == LogKind.HANDOFF:
            handoff = record.lsn

    return Replayed(
        committed=committed,
        votes=votes,
        last_checkpoint_lsn=last_checkpoint,
        torn_at=torn_at,
        handoff_lsn=handoff,
        records=len(records),
    )
