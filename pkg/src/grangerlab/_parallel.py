"""Ordered parallel map capped by ``GRANGERLAB_THREADS``."""

import os
from concurrent.futures import ThreadPoolExecutor


def n_threads() -> int:
    raw = os.environ.get("GRANGERLAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def pmap(fn, items):
    """``[fn(x) for x in items]``, possibly evaluated on a thread pool.

    Output order always follows input order, so results do not depend on
    the number of threads as long as ``fn`` is deterministic per item.
    """
    items = list(items)
    workers = min(n_threads(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
