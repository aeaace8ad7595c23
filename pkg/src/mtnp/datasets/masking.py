"""Incomplete-context sampling."""

from typing import Sequence, Tuple

import numpy as np

from mtnp.errors import SizeError

MAX_RESAMPLES = 100
EVAL_GAMMAS = (0.0, 0.25, 0.5, 0.75)


def sample_drop_mask(rng: np.random.Generator, m: int, n_tasks: int, gamma: float,
                     ensure_nonempty: bool = True) -> np.ndarray:
    """Observation mask of shape ``(m, T)``; each entry dropped with probability ``gamma``.

    With ``ensure_nonempty`` the pattern is redrawn (up to ``MAX_RESAMPLES``
    times) until every task keeps an observation; after that one random
    point is forced observed for each empty task.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"missing rate must lie in [0, 1], got {gamma}")
    mask = rng.random((m, n_tasks)) >= gamma
    if not ensure_nonempty:
        return mask
    tries = 0
    while not mask.any(axis=0).all() and tries < MAX_RESAMPLES:
        mask = rng.random((m, n_tasks)) >= gamma
        tries += 1
    for t in np.flatnonzero(~mask.any(axis=0)):
        mask[rng.integers(m), t] = True
    return mask


def sample_context_mask(rng: np.random.Generator, n_target: int, n_tasks: int, m: int, gamma: float,
                        ensure_nonempty: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Pick ``m`` of the ``n_target`` target points as context and drop labels.

    Returns ``(context_index, mask)`` where ``mask`` has shape ``(m, T)``.
    """
    if m > n_target:
        raise SizeError(f"context size {m} exceeds target size {n_target}")
    if m < 1:
        raise SizeError("context size must be at least 1")
    idx = rng.choice(n_target, size=m, replace=False)
    return idx, sample_drop_mask(rng, m, n_tasks, gamma, ensure_nonempty)


def sample_totally_incomplete(rng: np.random.Generator, n_points: int,
                              per_task_counts: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Context where no input point carries more than one task label.

    Returns ``(context_index, mask)`` with ``sum(per_task_counts)`` rows;
    the index sets of different tasks are pairwise disjoint.
    """
    counts = [int(c) for c in per_task_counts]
    if any(c < 1 for c in counts):
        raise SizeError("every task needs at least one context point")
    total = sum(counts)
    if total > n_points:
        raise SizeError(f"{total} distinct inputs requested but only {n_points} available")
    idx = rng.choice(n_points, size=total, replace=False)
    mask = np.zeros((total, len(counts)), dtype=bool)
    start = 0
    for t, c in enumerate(counts):
        mask[start:start + c, t] = True
        start += c
    return idx, mask
