# ---------------------------------------------------
# Workload
# /harness/workload.py
# ---------------------------------------------------
"""Seeded operation streams, one per client.

Transactions touch keys of one partition only; minitransactions span up
to `mtx_partitions` partitions.
"""
import logging
from typing import Dict, Iterator, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from ..utils.helpers import format_key
from .scenario import WorkloadSpec

logger = logging.getLogger(__name__)


class ReadOnlyOp(BaseModel):
    kind: Literal["read_only"] = "read_only"
    keys: List[str]


class TxnStep(BaseModel):
    action: Literal["read", "write"]
    key: str


class TxnOp(BaseModel):
    kind: Literal["txn"] = "txn"
    steps: List[TxnStep]


class MtxOp(BaseModel):
    """Values of `compares` are filled in by the client from what it last saw"""

    kind: Literal["mtx"] = "mtx"
    compares: List[str] = Field(default_factory=list)
    reads: List[str] = Field(default_factory=list)
    writes: List[str] = Field(default_factory=list)


Op = Union[ReadOnlyOp, TxnOp, MtxOp]


class KeyChooser:
    """Draws key indices uniformly or from a zipfian law (rank r has mass r^-s)"""

    def __init__(self, rng: np.random.Generator, key_space: int, distribution: str, s: float):
        self.rng = rng
        self.key_space = key_space
        self.cdf: Optional[np.ndarray] = None
        if distribution == "zipfian":
            weights = 1.0 / np.power(np.arange(1, key_space + 1, dtype=float), s)
            self.cdf = np.cumsum(weights) / weights.sum()

    def draw(self) -> int:
        if self.cdf is None:
            return int(self.rng.integers(0, self.key_space))
        index = int(np.searchsorted(self.cdf, self.rng.random(), side="right"))
        return min(index, self.key_space - 1)

    def draw_in(self, lo: int, hi: int, tries: int = 16) -> int:
        """A key of [lo, hi), keeping the skew where the range allows it"""
        for _ in range(tries):
            index = self.draw()
            if lo <= index < hi:
                return index
        return int(self.rng.integers(lo, hi))


def partition_of(index: int, bounds: List[Tuple[int, int]]) -> int:
    for pid, (lo, hi) in enumerate(bounds):
        if lo <= index < hi:
            return pid
    raise KeyError(index)


def gen_workload(
    spec: WorkloadSpec,
    seed: int,
    client_index: int,
    key_space: int,
    bounds: List[Tuple[int, int]],
) -> Iterator[Op]:
    """Endless, reproducible stream for one client"""
    rng = np.random.default_rng([seed, client_index])
    keys = KeyChooser(rng, key_space, spec.distribution, spec.zipf_s)
    kinds = sorted(k for k, w in spec.mix.items() if w > 0)
    weights = np.array([spec.mix[k] for k in kinds], dtype=float)
    weights /= weights.sum()

    while True:
        kind = kinds[int(rng.choice(len(kinds), p=weights))]
        if kind == "read_only":
            count = int(rng.integers(1, spec.ops_per_txn + 1))
            yield ReadOnlyOp(keys=[format_key(keys.draw()) for _ in range(count)])
        elif kind == "txn":
            first = keys.draw()
            lo, hi = bounds[partition_of(first, bounds)]
            steps = []
            for i in range(spec.ops_per_txn):
                index = first if i == 0 else keys.draw_in(lo, hi)
                action = "read" if rng.random() < spec.read_fraction else "write"
                steps.append(TxnStep(action=action, key=format_key(index)))
            yield TxnOp(steps=steps)
        else:
            width = min(spec.mtx_partitions, len(bounds))
            chosen = sorted(int(p) for p in rng.choice(len(bounds), size=width, replace=False))
            op = MtxOp()
            for pid in chosen:
                key = format_key(keys.draw_in(*bounds[pid]))
                if key in op.writes:
                    continue
                op.writes.append(key)
                if rng.random() < spec.compare_probability:
                    op.compares.append(key)
                if rng.random() < spec.read_fraction:
                    op.reads.append(key)
            yield op


def key_frequencies(ops: List[Op]) -> Dict[str, int]:
    """How often each key is touched; used to check the skew of a stream"""
    counts: Dict[str, int] = {}
    for op in ops:
        if isinstance(op, ReadOnlyOp):
            touched = op.keys
        elif isinstance(op, TxnOp):
            touched = [s.key for s in op.steps]
        else:
            touched = op.writes
        for key in touched:
            counts[key] = counts.get(key, 0) + 1
    return counts
