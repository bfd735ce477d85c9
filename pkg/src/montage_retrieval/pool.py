"""Order-preserving process pool for per-scan jobs."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

from threadpoolctl import threadpool_limits

WORKERS_ENV = "MONTAGE_RETRIEVAL_WORKERS"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _init_worker(initializer, initargs):
    # one BLAS thread per process keeps every worker count on the same arithmetic
    threadpool_limits(limits=1)
    if initializer is not None:
        initializer(*initargs)


def run_jobs(fn, items, workers=1, initializer=None, initargs=()):
    """Apply ``fn`` to every item and return results in input order.

    ``workers == 1`` runs in-process, so small batches skip pool start-up.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        with threadpool_limits(limits=1):
            if initializer is not None:
                initializer(*initargs)
            return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                             initargs=(initializer, initargs)) as ex:
        return list(ex.map(fn, items))
