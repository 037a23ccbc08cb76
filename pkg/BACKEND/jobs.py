"""Seed splitting and the bounded worker pool."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

import numpy as np

import SETTINGS

logger = logging.getLogger("surrogate_dpm.jobs")

T = TypeVar("T")
R = TypeVar("R")


def job_seed(root_seed: int, *coords: int) -> np.random.SeedSequence:
    # Seeds depend on job coordinates only, never on scheduling order.
    return np.random.SeedSequence(root_seed, spawn_key=tuple(int(c) for c in coords))


def job_rng(root_seed: int, *coords: int) -> np.random.Generator:
    return np.random.default_rng(job_seed(root_seed, *coords))


def default_jobs() -> int:
    raw = os.getenv("SURROGATE_JOBS", "").strip()
    if not raw:
        return SETTINGS.JOBS
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("ignoring SURROGATE_JOBS=%r (not an integer)", raw)
        return SETTINGS.JOBS


def run_pool(fn: Callable[[T], R], tasks: Iterable[T], jobs: int = 1) -> list[R]:
    """Map fn over tasks, results in task order. jobs == 1 runs in-process."""
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))
