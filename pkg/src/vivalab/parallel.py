"""Order-preserving worker pool; results are independent of thread count."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

VIVA_LAB_THREADS_ENV = "VIVA_LAB_THREADS"


def resolve_threads(requested: int | None = None) -> int:
    env = os.environ.get(VIVA_LAB_THREADS_ENV)
    if env is not None:
        return max(1, int(env))
    if requested is not None:
        return max(1, requested)
    return os.cpu_count() or 1


def parallel_map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
