# ---------------------------------------------------
# Helpers
# /utils/helpers.py
# ---------------------------------------------------
import json
from typing import Any, Iterator

import backoff

KEY_WIDTH = 6


def format_key(index: int) -> str:
    """Key for a key-space index; lexicographic order equals numeric order"""
    return f"k{index:0{KEY_WIDTH}d}"


def key_index(key: str) -> int:
    return int(key[1:])


def stable_dumps(payload: Any) -> str:
    """Compact JSON with sorted keys, used wherever bytes must be reproducible"""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def retry_delays(base: int, cap: int) -> Iterator[int]:
    """Exponential retry delays in ticks, drawn from backoff's expo generator"""
    gen = backoff.expo(base=2, factor=base, max_value=cap)
    # expo yields None first so that it can be primed with send()
    next(gen)
    for delay in gen:
        yield max(1, int(delay))
