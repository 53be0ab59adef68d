"""Order-preserving worker pool shared by all modules.

Results are always merged in input order, so output never depends on the
worker count.
"""

import os
from concurrent.futures import ThreadPoolExecutor

_max_workers = None


def set_threads(n):
    global _max_workers
    if n is not None and n < 1:
        raise ValueError("thread count must be >= 1")
    _max_workers = n


def get_threads():
    if _max_workers is not None:
        return _max_workers
    return os.cpu_count() or 1


def ordered_map(fn, items):
    items = list(items)
    n = min(get_threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
