"""Thread-count configuration and row-parallel helpers.

Every parallel path in the package splits work over output rows only, so a
row's arithmetic is the same whatever the thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Tuple

ENV_THREADS = "ODYSSEY_THREADS"

_threads: Optional[int] = None


def default_threads() -> int:
    return os.cpu_count() or 1


def set_threads(n: Optional[int]) -> None:
    """Set the worker count. ``None`` restores the default."""
    global _threads
    if n is not None and n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _threads = n


def get_threads() -> int:
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {env!r}") from None
        if n < 1:
            raise ValueError(f"{ENV_THREADS} must be >= 1, got {n}")
        return n
    return _threads if _threads is not None else default_threads()


def row_chunks(rows: int, parts: int) -> List[Tuple[int, int]]:
    parts = max(1, min(parts, rows))
    step, extra = divmod(rows, parts)
    out = []
    start = 0
    for p in range(parts):
        stop = start + step + (1 if p < extra else 0)
        out.append((start, stop))
        start = stop
    return out


def map_rows(fn: Callable[[int, int], object], rows: int, threads: Optional[int] = None) -> list:
    """Call ``fn(start, stop)`` on contiguous row ranges; results in row order."""
    n = threads if threads is not None else get_threads()
    chunks = row_chunks(rows, n) if rows > 0 else []
    if len(chunks) <= 1:
        return [fn(a, b) for a, b in chunks]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        futures = [pool.submit(fn, a, b) for a, b in chunks]
        return [f.result() for f in futures]
