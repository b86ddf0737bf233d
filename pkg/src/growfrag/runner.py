"""Replicate-level parallelism with order-independent merges.

Batches are keyed by index before dispatch and results are collected in
index order, so aggregates do not depend on the worker count or on
completion order.  Workers=1 bypasses the pool entirely.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def map_batches(fn, jobs, workers: int = 1):
    """Apply fn(*job) to each job; results in submission order."""
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]
