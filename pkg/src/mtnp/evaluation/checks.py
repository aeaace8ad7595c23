"""Stochastic-process property checks and the mocks that must fail them.

A conditional model defines a valid stochastic process when its predictive
distributions are exchangeable (invariant to reordering context and,
correspondingly, target points) and consistent (marginalizing target points
away leaves the others unchanged). Both are checked numerically with the
latent noise held fixed.
"""

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from mtnp.datasets.batch import MultiTaskBatch
from mtnp.models.network import NeuralProcessModel, PredictiveParams

EXCHANGEABILITY_TOL = 1e-5
CONSISTENCY_TOL = 1e-6


@dataclass
class CheckReport:
    name: str
    max_deviation: float
    tolerance: float
    trials: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_deviation)) and self.max_deviation < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max deviation {self.max_deviation:.3e} (tol {self.tolerance:.0e}, {self.trials} trials)"


def _prepare(model, batch: MultiTaskBatch, dtype):
    if dtype is None:
        return model, batch
    return copy.deepcopy(model).to(dtype), batch.to(dtype)


@torch.no_grad()
def _predict(model, batch, noise_seed: int, n_samples: int) -> PredictiveParams:
    gen = torch.Generator().manual_seed(noise_seed)
    return model.predict(batch, n_z=n_samples, n_v=n_samples, generator=gen)


def _deviation(a: PredictiveParams, b: PredictiveParams) -> float:
    dev = max(float((a.mean - b.mean).abs().max()), float((a.var - b.var).abs().max()))
    if a.logits is not None:
        dev = max(dev, float((a.logits - b.logits).abs().max()))
    return dev


def _take_targets(p: PredictiveParams, idx) -> PredictiveParams:
    idx = torch.as_tensor(idx, dtype=torch.long)
    return PredictiveParams(p.mean[:, :, idx], p.var[:, :, idx],
                            None if p.logits is None else p.logits[:, :, idx], p.tasks)


def check_exchangeability(model: NeuralProcessModel, batch: MultiTaskBatch, rng: np.random.Generator,
                          trials: int = 20, tol: float = EXCHANGEABILITY_TOL, noise_seed: int = 0,
                          n_samples: int = 2, dtype: Optional[torch.dtype] = torch.float64) -> CheckReport:
    """Permute context points and target points at random; parameters must follow the targets.

    Context rows are permuted jointly across tasks, which permutes every
    task's context set. The latent noise is identical across calls.
    """
    model, batch = _prepare(model, batch, dtype)
    ref = _predict(model, batch, noise_seed, n_samples)
    worst = 0.0
    for _ in range(trials):
        pc = rng.permutation(batch.x_context.shape[1])
        pt = rng.permutation(batch.x_target.shape[1])
        out = _predict(model, batch.permute_context(pc).with_targets(pt), noise_seed, n_samples)
        worst = max(worst, _deviation(out, _take_targets(ref, pt)))
    return CheckReport("exchangeability", worst, tol, trials)


def check_consistency(model: NeuralProcessModel, batch: MultiTaskBatch, rng: np.random.Generator,
                      trials: int = 10, tol: float = CONSISTENCY_TOL, noise_seed: int = 0,
                      n_samples: int = 2, dtype: Optional[torch.dtype] = torch.float64) -> CheckReport:
    """Predict on random target subsets (including a singleton); compare with the full set."""
    model, batch = _prepare(model, batch, dtype)
    n = batch.x_target.shape[1]
    ref = _predict(model, batch, noise_seed, n_samples)
    worst = 0.0
    for i in range(trials):
        size = 1 if i == 0 else int(rng.integers(1, n + 1))
        idx = np.sort(rng.choice(n, size=size, replace=False))
        out = _predict(model, batch.with_targets(idx), noise_seed, n_samples)
        worst = max(worst, _deviation(out, _take_targets(ref, idx)))
    return CheckReport("consistency", worst, tol, trials)


# ---------------------------------------------------------------- negative controls

def _position_bias(x, mask):
    w = torch.linspace(1.0, 2.0, x.shape[1], dtype=x.dtype)
    keep = mask.any(-1).to(x.dtype)
    return (x[..., 0] * w * keep).sum(dim=1)                   # (B,)


class _OrderDependentModel(NeuralProcessModel):
    def summarize(self, x, y, mask):
        s_task, s_all = super().summarize(x, y, mask)
        b = _position_bias(x, mask)
        return s_task + b[:, None, None], None if s_all is None else s_all + b[:, None]

    def encode_deterministic(self, batch):
        bias = _position_bias(batch.x_context, batch.mask_context)
        return super().encode_deterministic(batch) + bias[:, None, None, None]


class _TargetCouplingModel(NeuralProcessModel):
    def decode(self, x_target, latent, r):
        p = super().decode(x_target, latent, r)
        shift = x_target[..., 0].mean(dim=1)[None, :, None, None]
        return PredictiveParams(p.mean + shift, p.var, p.logits, p.tasks)


def order_dependent_mock(model: NeuralProcessModel) -> NeuralProcessModel:
    """Copy of ``model`` whose encoders weight context points by their position."""
    mock = copy.deepcopy(model)
    mock.__class__ = _OrderDependentModel
    return mock


def target_coupling_mock(model: NeuralProcessModel) -> NeuralProcessModel:
    """Copy of ``model`` whose decoder shifts every prediction by the mean target input."""
    mock = copy.deepcopy(model)
    mock.__class__ = _TargetCouplingModel
    return mock
