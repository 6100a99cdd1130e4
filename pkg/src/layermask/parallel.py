"""Order-preserving map over independent work items."""

from concurrent.futures import ThreadPoolExecutor


def pmap(fn, items, threads: int = 1):
    """Like list(map(fn, items)); fans out over a thread pool when threads > 1.

    Work items must be pure, so results are identical at any thread count.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
