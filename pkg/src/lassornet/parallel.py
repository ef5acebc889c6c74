"""Order-preserving fan-out over worker processes."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List


def pmap(fn: Callable, items: Iterable, threads: int = 1) -> List:
    """``[fn(x) for x in items]``, optionally spread over ``threads`` processes.

    Results come back in input order whatever the completion order, so output does
    not depend on the worker count.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as ex:
        return list(ex.map(fn, items))
