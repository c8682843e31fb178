"""Key-granularity lock table for strict two-phase locking with wait-die."""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional

from .kernel import MimirError

logger = logging.getLogger(__name__)


class TransactionAborted(MimirError):
    def __init__(self, reason: str, retryable: bool = True):
        super().__init__(reason)
        self.reason = reason
        self.retryable = retryable


class LockMode(str, Enum):
    SHARED = "S"
    EXCLUSIVE = "X"


class LockResult(str, Enum):
    GRANTED = "GRANTED"
    WAITING = "WAITING"
    DIE = "DIE"


@dataclass
class _Waiter:
    holder: str
    mode: LockMode
    on_grant: Optional[Callable[[], None]]


@dataclass
class _Lock:
    sharers: Dict[str, bool] = field(default_factory=dict)
    exclusive: Optional[str] = None
    waiters: List[_Waiter] = field(default_factory=list)

    def idle(self) -> bool:
        return not self.sharers and self.exclusive is None and not self.waiters


class LockTable:
    """Strict 2PL lock manager.

    Ages order holders for wait-die: a requester may only wait for holders
    (and earlier conflicting waiters) younger than itself, otherwise it
    dies. Every waits-for edge therefore points from older to younger and
    no deadlock can form.
    """

    def __init__(self):
        self._locks: Dict[str, _Lock] = {}
        self._ages: Dict[str, int] = {}
        self._held: Dict[str, Dict[str, bool]] = {}

    def acquire(
        self,
        holder: str,
        key: str,
        mode: LockMode,
        age: int,
        on_grant: Optional[Callable[[], None]] = None,
    ) -> LockResult:
        self._ages.setdefault(holder, age)
        lock = self._locks.setdefault(key, _Lock())
        if self._holds(lock, holder, mode):
            return LockResult.GRANTED
        blockers = self._blockers(lock, holder, mode)
        if not blockers:
            self._grant(lock, holder, key, mode)
            return LockResult.GRANTED
        if any(self._ages[b] < self._ages[holder] for b in blockers):
            return LockResult.DIE
        lock.waiters.append(_Waiter(holder, mode, on_grant))
        return LockResult.WAITING

    def try_acquire(self, holder: str, key: str, mode: LockMode, age: int) -> bool:
        """Non-blocking acquisition: grant now or refuse"""
        self._ages.setdefault(holder, age)
        lock = self._locks.setdefault(key, _Lock())
        if self._holds(lock, holder, mode):
            return True
        if self._blockers(lock, holder, mode):
            if lock.idle():
                del self._locks[key]
            return False
        self._grant(lock, holder, key, mode)
        return True

    def release_all(self, holder: str) -> List[str]:
        """Release every lock and pending wait of `holder`; wakes waiters"""
        keys = sorted(self._held.pop(holder, {}))
        woken: List[Callable[[], None]] = []
        touched = set(keys)
        for key, lock in self._locks.items():
            if any(w.holder == holder for w in lock.waiters):
                lock.waiters = [w for w in lock.waiters if w.holder != holder]
                touched.add(key)
        for key in sorted(touched):
            lock = self._locks.get(key)
            if lock is None:
                continue
            lock.sharers.pop(holder, None)
            if lock.exclusive == holder:
                lock.exclusive = None
            woken.extend(self._promote(key, lock))
            if lock.idle():
                del self._locks[key]
        self._ages.pop(holder, None)
        for callback in woken:
            callback()
        return keys

    def held_by(self, holder: str) -> Dict[str, LockMode]:
        result = {}
        for key in sorted(self._held.get(holder, {})):
            lock = self._locks[key]
            result[key] = LockMode.EXCLUSIVE if lock.exclusive == holder else LockMode.SHARED
        return result

    def is_waiting(self, holder: str) -> bool:
        return any(w.holder == holder for lock in self._locks.values() for w in lock.waiters)

    def mode_of(self, key: str) -> Optional[LockMode]:
        lock = self._locks.get(key)
        if lock is None:
            return None
        if lock.exclusive is not None:
            return LockMode.EXCLUSIVE
        return LockMode.SHARED if lock.sharers else None

    def _holds(self, lock: _Lock, holder: str, mode: LockMode) -> bool:
        if lock.exclusive == holder:
            return True
        return mode == LockMode.SHARED and holder in lock.sharers

    def _blockers(self, lock: _Lock, holder: str, mode: LockMode) -> List[str]:
        blockers = []
        if lock.exclusive is not None and lock.exclusive != holder:
            blockers.append(lock.exclusive)
        if mode == LockMode.EXCLUSIVE:
            blockers.extend(h for h in lock.sharers if h != holder)
        for waiter in lock.waiters:
            if waiter.holder != holder and (
                mode == LockMode.EXCLUSIVE or waiter.mode == LockMode.EXCLUSIVE
            ):
                blockers.append(waiter.holder)
        return blockers

    def _grant(self, lock: _Lock, holder: str, key: str, mode: LockMode) -> None:
        if mode == LockMode.EXCLUSIVE:
            lock.sharers.pop(holder, None)
            lock.exclusive = holder
        else:
            lock.sharers[holder] = True
        self._held.setdefault(holder, {})[key] = True

    def _promote(self, key: str, lock: _Lock) -> List[Callable[[], None]]:
        granted = []
        while lock.waiters:
            waiter = lock.waiters[0]
            if lock.exclusive is not None and lock.exclusive != waiter.holder:
                break
            if waiter.mode == LockMode.EXCLUSIVE and any(h != waiter.holder for h in lock.sharers):
                break
            lock.waiters.pop(0)
            self._grant(lock, waiter.holder, key, waiter.mode)
            if waiter.on_grant is not None:
                granted.append(waiter.on_grant)
        return granted
