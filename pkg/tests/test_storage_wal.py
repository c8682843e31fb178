import pytest

from mimir.models import Decision, Vote
from mimir.services.storage import DurableVolume
from mimir.services.wal import LogKind, LogRecord, TornRecordError, decode_log, replay


def rec(kind: LogKind, rec_id: str, epoch: int = 1, **data) -> bytes:
    return LogRecord(kind, rec_id, epoch, data).encode()


def update(txn: str, key: str, value: str) -> bytes:
    return rec(LogKind.UPDATE, txn, key=key, value=value)


def test_empty_log_replays_to_empty_state():
    state = replay([])
    assert state.committed == {} and state.votes == {}
    assert state.last_checkpoint_lsn == -1 and state.torn_at is None


def test_replay_redoes_committed_transactions_only():
    log = [
        rec(LogKind.BEGIN, "t1"),
        update("t1", "a", "1"),
        rec(LogKind.COMMIT, "t1"),
        rec(LogKind.BEGIN, "t2"),
        update("t2", "b", "2"),
    ]
    assert replay(log).committed == {"a": "1"}


def test_aborted_updates_are_not_redone():
    log = [update("t1", "a", "1"), rec(LogKind.ABORT, "t1"), update("t2", "a", "2"), rec(LogKind.COMMIT, "t2")]
    assert replay(log).committed == {"a": "2"}


def test_torn_tail_ends_the_readable_log():
    torn = update("t2", "b", "2")[:-3]
    log = [update("t1", "a", "1"), rec(LogKind.COMMIT, "t1"), torn, rec(LogKind.COMMIT, "t2")]
    records, torn_at = decode_log(log)
    assert torn_at == 2 and len(records) == 2
    state = replay(log)
    assert state.torn_at == 2 and state.committed == {"a": "1"}


def test_corrupt_checksum_is_detected():
    raw = bytearray(update("t1", "a", "1"))
    raw[-2] ^= 0xFF
    with pytest.raises(TornRecordError):
        LogRecord.decode(bytes(raw))


def test_replay_starts_from_the_last_checkpoint():
    log = [
        update("t1", "a", "old"),
        rec(LogKind.COMMIT, "t1"),
        rec(LogKind.CHECKPOINT, "cp", state={"a": "snap"}, votes={}),
        update("t2", "b", "2"),
        rec(LogKind.COMMIT, "t2"),
    ]
    state = replay(log)
    assert state.last_checkpoint_lsn == 2
    assert state.committed == {"a": "snap", "b": "2"}


def test_mtx_vote_without_decision_is_in_doubt():
    vote = rec(LogKind.MTX_VOTE, "m1", vote="YES", keys={"k": "X"}, writes={"k": "v"}, participants=[0, 1])
    state = replay([vote])
    assert state.in_doubt == ["m1"]
    assert state.votes["m1"].writes == {"k": "v"}


def test_mtx_commit_decision_applies_buffered_writes_once():
    log = [
        rec(LogKind.MTX_VOTE, "m1", vote="YES", writes={"k": "v"}),
        update("m1", "k", "v"),
        rec(LogKind.MTX_DECISION, "m1", decision="COMMIT"),
        rec(LogKind.MTX_DECISION, "m1", decision="ABORT"),
    ]
    state = replay(log)
    assert state.committed == {"k": "v"}
    assert state.votes["m1"].vote == Vote.YES and state.votes["m1"].decision == Decision.COMMIT
    assert state.in_doubt == []


def test_handoff_marker_is_reported():
    log = [update("t1", "a", "1"), rec(LogKind.COMMIT, "t1"), rec(LogKind.HANDOFF, "otm1")]
    assert replay(log).handoff_lsn == 2


def test_volume_rejects_older_epoch_even_when_detached():
    volume = DurableVolume("v")
    volume.attach("otm0", 3)
    volume.detach("otm0")
    with pytest.raises(ValueError):
        volume.attach("otm1", 2)
    assert volume.attach("otm1", 3) is None
    assert volume.attach("otm2", 4) == "otm1"


def test_volume_truncate_drops_the_tail():
    volume = DurableVolume("v")
    volume.attach("otm0", 1)
    for i in range(4):
        volume.append("otm0", bytes([i]), 1)
    volume.truncate("otm0", 1, 2)
    assert volume.read("otm0") == [b"\x00", b"\x01"] and volume.next_lsn == 2
