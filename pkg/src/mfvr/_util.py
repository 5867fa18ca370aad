"""Small shared helpers."""

from __future__ import annotations

import contextlib
from concurrent.futures import ThreadPoolExecutor

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def single_threaded_blas():
    """Limit BLAS pools to one thread for batches of small factorizations.

    Multithreaded BLAS pays thread-sync overhead on every tiny banded
    factorization (observed ~6x slowdown); entering this context once per
    sample batch amortises the control cost.
    """
    if threadpool_limits is None:
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def parallel_map(fn, n_items: int, threads: int = 1) -> list:
    """Map ``fn`` over ``range(n_items)``, optionally on a thread pool.

    Results come back in index order, so the output is identical for any
    thread count provided ``fn(i)`` depends only on ``i``.
    """
    if threads <= 1 or n_items <= 1:
        return [fn(i) for i in range(n_items)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_items)))
