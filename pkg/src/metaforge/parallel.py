"""Deterministic fan-out helpers.

Work is split into fixed-size chunks and results are reduced in chunk order,
so floating-point accumulations are bitwise identical for any worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

#: Chunk size is independent of the worker count on purpose: the reduction
#: tree must not change when --jobs changes.
CHUNK_SIZE = 16


def default_jobs() -> int:
    return os.cpu_count() or 1


def make_chunks(items, size: int = CHUNK_SIZE) -> list[list]:
    items = list(items)
    return [items[i : i + size] for i in range(0, len(items), size)]


def run_tasks(fn, tasks: list, jobs: int = 1) -> list:
    """Order-preserving map of ``fn`` over ``tasks``.

    With jobs > 1 the function must be picklable (module level); results come
    back in task order regardless of completion order.
    """
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))
