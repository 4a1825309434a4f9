"""Order-preserving parallel map; results never depend on the worker count."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def pmap(fn: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> list[R]:
    items = list(items)
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    if jobs == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
