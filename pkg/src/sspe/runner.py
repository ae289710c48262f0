"""Bounded-concurrency execution of independent replicate jobs."""

from __future__ import annotations

import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .particle_core import replicate_key


@dataclass(frozen=True)
class Job:
    """One replicate: ``fn(**kwargs)`` must be picklable when run in a pool."""

    index: int
    fn: Callable[..., Any]
    kwargs: dict = field(default_factory=dict)
    label: str = ""


@dataclass
class RunnerResult:
    results: dict[int, Any]
    failures: dict[int, str]

    @property
    def ok(self) -> bool:
        return not self.failures

    def ordered(self) -> list[Any]:
        return [self.results[i] for i in sorted(self.results)]


def _call(job: Job):
    try:
        return job.index, True, job.fn(**job.kwargs)
    except Exception:  # noqa: BLE001 - reported in the manifest
        return job.index, False, traceback.format_exc()


def replicate_runner(jobs: list[Job], parallelism: int = 1) -> RunnerResult:
    """Run ``jobs`` with at most ``parallelism`` worker processes.

    Results are keyed by job index, so the outcome does not depend on
    scheduling order.  A failing job is recorded and the others proceed.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    idx = [j.index for j in jobs]
    if len(set(idx)) != len(idx):
        raise ValueError("job indices must be unique")
    results, failures = {}, {}
    if parallelism == 1 or len(jobs) <= 1:
        outcomes = map(_call, jobs)
    else:
        pool = ProcessPoolExecutor(max_workers=min(parallelism, len(jobs)))
        outcomes = pool.map(_call, jobs)
    try:
        for i, ok, val in outcomes:
            (results if ok else failures)[i] = val
    finally:
        if parallelism > 1 and len(jobs) > 1:
            pool.shutdown()
    return RunnerResult(results, failures)


def replicate_seed(master_seed: int, replicate: int) -> tuple[int, int]:
    """The 128-bit Philox key of a replicate, as two unsigned 64-bit words."""
    k = replicate_key(master_seed, replicate)
    return int(k[0]), int(k[1])


def seeds_are_distinct(master_seed: int, n: int) -> bool:
    keys = np.array([replicate_key(master_seed, r) for r in range(n)])
    return np.unique(keys, axis=0).shape[0] == n
