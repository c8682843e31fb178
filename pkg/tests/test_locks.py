from mimir.services.locks import LockMode, LockResult, LockTable

S, X = LockMode.SHARED, LockMode.EXCLUSIVE


def test_shared_locks_are_compatible():
    locks = LockTable()
    assert locks.acquire("t1", "k", S, 1) == LockResult.GRANTED
    assert locks.acquire("t2", "k", S, 2) == LockResult.GRANTED
    assert locks.mode_of("k") == S


def test_reacquire_and_upgrade_by_sole_holder():
    locks = LockTable()
    locks.acquire("t1", "k", S, 1)
    assert locks.acquire("t1", "k", S, 1) == LockResult.GRANTED
    assert locks.acquire("t1", "k", X, 1) == LockResult.GRANTED
    assert locks.held_by("t1") == {"k": X}


def test_younger_requester_dies():
    locks = LockTable()
    locks.acquire("old", "k", X, 1)
    assert locks.acquire("young", "k", S, 2) == LockResult.DIE
    assert not locks.is_waiting("young")


def test_older_requester_waits_and_is_granted_on_release():
    locks = LockTable()
    granted = []
    locks.acquire("young", "k", X, 5)
    assert locks.acquire("old", "k", X, 1, lambda: granted.append("old")) == LockResult.WAITING
    assert locks.is_waiting("old")
    assert locks.release_all("young") == ["k"]
    assert granted == ["old"] and locks.held_by("old") == {"k": X}


def test_requester_dies_behind_an_older_waiter():
    locks = LockTable()
    locks.acquire("t5", "k", X, 5)
    locks.acquire("t1", "k", X, 1)
    assert locks.acquire("t3", "k", X, 3) == LockResult.DIE


def test_release_removes_pending_waits():
    locks = LockTable()
    locks.acquire("t5", "k", X, 5)
    locks.acquire("t1", "k", X, 1)
    locks.release_all("t1")
    assert not locks.is_waiting("t1")
    locks.release_all("t5")
    assert locks.mode_of("k") is None


def test_waiting_sharers_are_granted_together():
    locks = LockTable()
    granted = []
    locks.acquire("t9", "k", X, 9)
    locks.acquire("t1", "k", S, 1, lambda: granted.append("t1"))
    locks.acquire("t2", "k", S, 2, lambda: granted.append("t2"))
    locks.release_all("t9")
    assert granted == ["t1", "t2"] and locks.mode_of("k") == S


def test_try_acquire_never_waits():
    locks = LockTable()
    locks.acquire("t1", "k", S, 1)
    assert not locks.try_acquire("m", "k", X, 0)
    assert locks.try_acquire("m", "other", X, 0)
    assert locks.held_by("m") == {"other": X}
