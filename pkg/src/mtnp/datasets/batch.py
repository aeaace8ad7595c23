"""Multi-task batches with per-(point, task) observation masks."""

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from mtnp.errors import DimensionError, EmptyContextError


@dataclass
class FunctionSplit:
    """A split of realized multi-task functions sampled on a fixed set of inputs.

    Attributes:
        x: inputs, shape ``(F, N)``.
        y: outputs, shape ``(F, N, T)``.
        scale: per-function, per-task normalizer for the normalized MSE, shape ``(F, T)``.
        task_names: names of the ``T`` tasks.
    """

    x: np.ndarray
    y: np.ndarray
    scale: np.ndarray
    task_names: Sequence[str]

    def __len__(self):
        return self.x.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.y.shape[-1]

    def subset(self, idx) -> "FunctionSplit":
        idx = np.asarray(idx)
        return FunctionSplit(self.x[idx], self.y[idx], self.scale[idx], self.task_names)


@dataclass
class MultiTaskBatch:
    """Context and target sets for a batch of ``B`` multi-task functions.

    Unobserved outputs hold NaN; consumers must only read entries whose mask
    is true. Inputs have a trailing feature axis (``dx``).
    """

    x_context: Tensor      # (B, Nc, dx)
    y_context: Tensor      # (B, Nc, T)
    mask_context: Tensor   # (B, Nc, T) bool
    x_target: Tensor       # (B, Nt, dx)
    y_target: Tensor       # (B, Nt, T)
    mask_target: Tensor    # (B, Nt, T) bool
    scale: Optional[Tensor] = None  # (B, T)

    def __post_init__(self):
        if self.y_context.shape != self.mask_context.shape:
            raise DimensionError("context outputs and mask differ in shape")
        if self.y_target.shape != self.mask_target.shape:
            raise DimensionError("target outputs and mask differ in shape")
        if self.x_context.shape[:2] != self.y_context.shape[:2]:
            raise DimensionError("context inputs and outputs differ in leading shape")
        if self.x_target.shape[:2] != self.y_target.shape[:2]:
            raise DimensionError("target inputs and outputs differ in leading shape")

    @property
    def n_tasks(self) -> int:
        return self.y_target.shape[-1]

    @property
    def batch_size(self) -> int:
        return self.x_target.shape[0]

    def context_complete(self) -> bool:
        """True when every context point that carries a label carries all of them."""
        any_obs = self.mask_context.any(-1, keepdim=True)
        return bool((self.mask_context == any_obs).all())

    def target_complete(self) -> bool:
        any_obs = self.mask_target.any(-1, keepdim=True)
        return bool((self.mask_target == any_obs).all())

    def check_nonempty(self):
        counts = self.mask_context.sum(dim=1)
        if bool((counts == 0).any()):
            b, t = (counts == 0).nonzero()[0].tolist()
            raise EmptyContextError(f"batch item {b} has no observed context point for task {t}")

    def to(self, dtype: torch.dtype) -> "MultiTaskBatch":
        return MultiTaskBatch(
            self.x_context.to(dtype), self.y_context.to(dtype), self.mask_context,
            self.x_target.to(dtype), self.y_target.to(dtype), self.mask_target,
            None if self.scale is None else self.scale.to(dtype),
        )

    def with_targets(self, idx) -> "MultiTaskBatch":
        """Keep only the target points at positions ``idx`` (same for all items)."""
        idx = torch.as_tensor(idx, dtype=torch.long)
        return replace(self, x_target=self.x_target[:, idx], y_target=self.y_target[:, idx],
                       mask_target=self.mask_target[:, idx])

    def context_as_target(self) -> "MultiTaskBatch":
        """The batch whose target set equals its context set (C = D)."""
        return replace(self, x_target=self.x_context, y_target=self.y_context,
                       mask_target=self.mask_context)

    def permute_context(self, perm) -> "MultiTaskBatch":
        perm = torch.as_tensor(perm, dtype=torch.long)
        return replace(self, x_context=self.x_context[:, perm], y_context=self.y_context[:, perm],
                       mask_context=self.mask_context[:, perm])


def stack_items(contexts: List[tuple], targets: List[tuple], scale=None,
                dtype: torch.dtype = torch.float32) -> MultiTaskBatch:
    """Pad and stack per-item ``(x, y, mask)`` arrays into a batch.

    ``x`` has shape ``(N,)`` or ``(N, dx)``; ``y`` and ``mask`` have shape ``(N, T)``.
    Padding rows are fully masked with NaN outputs.
    """

    def pad(items):
        n = max(len(it[0]) for it in items)
        xs, ys, ms = [], [], []
        for x, y, m in items:
            x = np.asarray(x, dtype=np.float64)
            x = x[:, None] if x.ndim == 1 else x
            y = np.where(m, y, np.nan)
            extra = n - len(x)
            xs.append(np.concatenate([x, np.zeros((extra, x.shape[1]))]))
            ys.append(np.concatenate([y, np.full((extra, y.shape[1]), np.nan)]))
            ms.append(np.concatenate([m, np.zeros((extra, m.shape[1]), bool)]))
        return (torch.as_tensor(np.stack(xs), dtype=dtype), torch.as_tensor(np.stack(ys), dtype=dtype),
                torch.as_tensor(np.stack(ms)))

    xc, yc, mc = pad(contexts)
    xt, yt, mt = pad(targets)
    sc = None if scale is None else torch.as_tensor(np.asarray(scale), dtype=dtype)
    return MultiTaskBatch(xc, yc, mc, xt, yt, mt, sc)
