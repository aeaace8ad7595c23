"""Monte-Carlo predictive summaries."""

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

from mtnp.datasets.batch import MultiTaskBatch
from mtnp.errors import ConfigError
from mtnp.models.network import NeuralProcessModel, PredictiveParams

MODES = ("mean", "map", "best")


@dataclass
class MCPrediction:
    """Point predictions ``(B, N, T)`` plus the per-sample parameters behind them."""

    mean: Tensor
    params: PredictiveParams
    mode: str
    chosen: Optional[Tensor] = None  # best mode: sample index per (item, task)

    @property
    def n_samples(self) -> int:
        return self.params.n_samples


@torch.no_grad()
def mc_predictive(model: NeuralProcessModel, batch: MultiTaskBatch, generator: Optional[torch.Generator] = None,
                  n_z: int = 5, n_v: int = 5, mode: str = "mean") -> MCPrediction:
    """Predict the target outputs of ``batch`` from its context.

    ``mean`` averages the sample means of all ``n_z * n_v`` ancestral draws;
    ``map`` decodes the posterior-mean latents once; ``best`` keeps, per item
    and task, the draw whose mean has the lowest squared error on the
    observed targets (an oracle that peeks at the targets).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown prediction mode {mode!r}; expected one of {MODES}")
    if mode == "map":
        params = model.predict(batch, map_mode=True)
        return MCPrediction(params.mean[0], params, mode)
    params = model.predict(batch, n_z=n_z, n_v=n_v, generator=generator)
    if mode == "mean":
        return MCPrediction(params.mean.mean(dim=0), params, mode)
    mask = batch.mask_target
    y = torch.where(mask, batch.y_target, torch.zeros((), dtype=batch.y_target.dtype))
    sq = ((params.mean - y) ** 2) * mask
    per = sq.sum(dim=2)                                   # (K, B, T)
    chosen = per.argmin(dim=0)                            # (B, T)
    idx = chosen[None, :, None, :].expand(1, *params.mean.shape[1:])
    best = torch.gather(params.mean, 0, idx)[0]
    return MCPrediction(best, params, mode, chosen)
