"""Order-preserving map over worker processes.

Work items must be independent and draw randomness only from streams keyed
by the item, so the result list is identical for any number of workers.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

_CTX = None
_FUNC = None


def _init(func, ctx):
    global _CTX, _FUNC
    _CTX, _FUNC = ctx, func


def _call(item):
    return _FUNC(_CTX, item)


def pmap(func: Callable, ctx, items: Sequence, threads: int = 1) -> list:
    """``[func(ctx, item) for item in items]``, optionally over ``threads`` processes.

    ``func`` must be a module-level function; ``ctx`` is shipped to each
    worker once.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [func(ctx, item) for item in items]
    workers = min(threads, len(items))
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers, initializer=_init, initargs=(func, ctx)) as pool:
        return list(pool.map(_call, items, chunksize=chunk))
