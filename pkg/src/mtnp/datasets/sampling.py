"""Assemble context/target batches from function splits."""

from typing import Optional, Sequence

import numpy as np
import torch

from mtnp.datasets.batch import FunctionSplit, MultiTaskBatch, stack_items
from mtnp.datasets.masking import sample_context_mask, sample_totally_incomplete


def context_from_target(rng: np.random.Generator, target: MultiTaskBatch, m: int, gamma: float,
                        ensure_nonempty: bool = True) -> MultiTaskBatch:
    """Choose ``m`` target points per item as context and drop labels at rate ``gamma``.

    The context is always a subset of the target (C is contained in D).
    """
    n_target = target.x_target.shape[1]
    T = target.n_tasks
    idx, masks = [], []
    for _ in range(target.batch_size):
        i, mk = sample_context_mask(rng, n_target, T, m, gamma, ensure_nonempty)
        idx.append(i)
        masks.append(mk)
    idx = torch.as_tensor(np.stack(idx), dtype=torch.long)
    mask = torch.as_tensor(np.stack(masks)) & torch.gather(
        target.mask_target, 1, idx[..., None].expand(-1, -1, T))
    gather = lambda t: torch.gather(t, 1, idx[..., None].expand(-1, -1, t.shape[-1]))
    y = gather(target.y_target).masked_fill(~mask, float("nan"))
    return MultiTaskBatch(gather(target.x_target), y, mask, target.x_target, target.y_target,
                          target.mask_target, target.scale)


def target_batch(split: FunctionSplit, family_idx: Sequence[int], point_idx: Optional[np.ndarray] = None,
                 dtype: torch.dtype = torch.float32) -> MultiTaskBatch:
    """Fully observed target sets; the context is left empty (size 0)."""
    family_idx = np.asarray(family_idx)
    x = split.x[family_idx]
    y = split.y[family_idx]
    if point_idx is not None:
        x = np.take_along_axis(x, point_idx, axis=1)
        y = np.take_along_axis(y, point_idx[..., None], axis=1)
    B, N, T = y.shape
    xt = torch.as_tensor(x[..., None], dtype=dtype)
    yt = torch.as_tensor(y, dtype=dtype)
    mt = torch.ones(B, N, T, dtype=torch.bool)
    empty = lambda d: torch.zeros(B, 0, d, dtype=dtype)
    return MultiTaskBatch(empty(1), empty(T), torch.zeros(B, 0, T, dtype=torch.bool), xt, yt, mt,
                          torch.as_tensor(split.scale[family_idx], dtype=dtype))


def make_batch(rng: np.random.Generator, split: FunctionSplit, family_idx: Sequence[int], m: int,
               gamma: float, n_target: Optional[int] = None, dtype: torch.dtype = torch.float32,
               ensure_nonempty: bool = True) -> MultiTaskBatch:
    """Target = all points (or a random subset of ``n_target``); context drawn from the target."""
    point_idx = None
    n_points = split.x.shape[1]
    if n_target is not None and n_target < n_points:
        point_idx = np.stack([rng.choice(n_points, n_target, replace=False) for _ in family_idx])
    target = target_batch(split, family_idx, point_idx, dtype)
    return context_from_target(rng, target, m, gamma, ensure_nonempty)


def make_totally_incomplete_batch(rng: np.random.Generator, split: FunctionSplit, family_idx: Sequence[int],
                                  per_task_counts: Sequence[int],
                                  dtype: torch.dtype = torch.float32) -> MultiTaskBatch:
    """Context with pairwise disjoint per-task input sets; target = all points."""
    contexts, targets = [], []
    for f in family_idx:
        x, y = split.x[f], split.y[f]
        idx, mask = sample_totally_incomplete(rng, len(x), per_task_counts)
        contexts.append((x[idx], y[idx], mask))
        targets.append((x, y, np.ones_like(y, dtype=bool)))
    return stack_items(contexts, targets, split.scale[np.asarray(family_idx)], dtype)
