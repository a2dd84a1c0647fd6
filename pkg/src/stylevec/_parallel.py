"""Per-key worker pool shared by every module.

Work is keyed by tensor name and results are reassembled in input order,
so output never depends on the thread count.
"""

from __future__ import annotations

import contextlib
import contextvars
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Iterator, TypeVar

T = TypeVar("T")
R = TypeVar("R")

_threads: contextvars.ContextVar[int] = contextvars.ContextVar("stylevec_threads", default=1)


def default_threads() -> int:
    raw = os.environ.get("STYLEVEC_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def current_threads() -> int:
    return _threads.get()


@contextlib.contextmanager
def threads(n: int) -> Iterator[None]:
    token = _threads.set(max(1, int(n)))
    try:
        yield
    finally:
        _threads.reset(token)


def pmap(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    items = list(items)
    n = _threads.get()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
