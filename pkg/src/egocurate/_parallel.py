import os
from concurrent.futures import ThreadPoolExecutor


def resolve_workers(workers=None):
    """Explicit value wins, then ``EGOCURATE_WORKERS``, then 1."""
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("EGOCURATE_WORKERS")
    if env:
        return max(1, int(env))
    return 1


def ordered_map(fn, items, workers=1):
    """``map`` that keeps input order; threads only change wall time."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
