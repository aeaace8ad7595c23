"""S+JTNP: complete an incomplete context with STNP predictions, then run JTNP."""

from typing import Optional

import torch

from mtnp.datasets.batch import MultiTaskBatch
from mtnp.errors import ConfigError
from mtnp.evaluation.predictive import MCPrediction, mc_predictive
from mtnp.models.network import NeuralProcessModel


@torch.no_grad()
def impute_context(imputer: NeuralProcessModel, batch: MultiTaskBatch,
                   generator: Optional[torch.Generator] = None, mode: str = "mean") -> MultiTaskBatch:
    """Fill the missing labels of every context point that carries at least one label.

    Observed labels are kept; missing ones are replaced by the imputer's
    prediction at that input given the same (incomplete) context. Points
    without any label stay unobserved.
    """
    if imputer.variant.requires_complete_context:
        raise ConfigError("the imputer must accept incomplete contexts")
    at_context = MultiTaskBatch(batch.x_context, batch.y_context, batch.mask_context,
                                batch.x_context, batch.y_context, batch.mask_context, batch.scale)
    pred = mc_predictive(imputer, at_context, generator, mode=mode).mean
    labeled = batch.mask_context.any(-1, keepdim=True)
    y = torch.where(batch.mask_context, batch.y_context, pred)
    mask = labeled.expand_as(batch.mask_context)
    y = y.masked_fill(~mask, float("nan"))
    return MultiTaskBatch(batch.x_context, y, mask, batch.x_target, batch.y_target, batch.mask_target,
                          batch.scale)


class ImputedJointPredictor:
    """Callable ``(batch, generator) -> MCPrediction`` composing an STNP imputer with JTNP."""

    def __init__(self, imputer: NeuralProcessModel, joint: NeuralProcessModel, n_samples: int = 5,
                 mode: str = "mean"):
        if joint.variant.family != "jtnp":
            raise ConfigError("the second model must be a jtnp")
        self.imputer, self.joint, self.n_samples, self.mode = imputer, joint, n_samples, mode

    def parameters(self):
        return self.joint.parameters()

    def __call__(self, batch: MultiTaskBatch, generator: Optional[torch.Generator] = None) -> MCPrediction:
        completed = impute_context(self.imputer, batch, generator)
        return mc_predictive(self.joint, completed, generator, n_z=self.n_samples, n_v=self.n_samples,
                             mode=self.mode)
