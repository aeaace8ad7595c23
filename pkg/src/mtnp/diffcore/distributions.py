"""Diagonal Gaussian and categorical likelihood terms."""

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor
from torch.nn import functional as F

from mtnp.errors import DimensionError, DomainError

LOG_2PI = math.log(2.0 * math.pi)

# floor on predicted standard deviations: sigma = 0.1 + 0.9 * softplus(raw)
STD_FLOOR = 0.1


def bounded_std(raw: Tensor) -> Tensor:
    """Map an unconstrained head output to a standard deviation >= 0.1."""
    return STD_FLOOR + (1.0 - STD_FLOOR) * F.softplus(raw)


@dataclass
class DiagGaussian:
    """Diagonal Gaussian with elementwise ``mean`` and ``var``."""

    mean: Tensor
    var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise DimensionError(
                f"mean shape {tuple(self.mean.shape)} != var shape {tuple(self.var.shape)}"
            )

    @classmethod
    def from_raw(cls, mean: Tensor, raw_std: Tensor) -> "DiagGaussian":
        std = bounded_std(raw_std)
        return cls(mean, std * std)

    @property
    def std(self) -> Tensor:
        return self.var.sqrt()

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.var.detach())

    def _check_positive(self):
        if not bool((self.var > 0).all()):
            raise DomainError("variance must be strictly positive")


def reparam_sample(dist: DiagGaussian, noise: Tensor) -> Tensor:
    """Return ``mean + sqrt(var) * noise``.

    Gradients flow into both the mean and the variance. ``noise`` must
    broadcast-match the distribution shape exactly.
    """
    if noise.shape != dist.mean.shape:
        raise DimensionError(
            f"noise shape {tuple(noise.shape)} != mean shape {tuple(dist.mean.shape)}"
        )
    dist._check_positive()
    return dist.mean + dist.var.sqrt() * noise


def gaussian_kl_diag(q: DiagGaussian, p: DiagGaussian, dim: Optional[int] = None) -> Tensor:
    """KL(q || p) between diagonal Gaussians.

    Summed over all elements when ``dim`` is None, otherwise over ``dim``
    (negative dims allowed) so per-item terms can be kept.
    """
    if q.mean.shape != p.mean.shape:
        raise DimensionError(
            f"KL shape mismatch: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}"
        )
    q._check_positive()
    p._check_positive()
    ratio = q.var / p.var
    kl = 0.5 * ((q.mean - p.mean) ** 2 / p.var + ratio - 1.0 - torch.log(ratio))
    if dim is None:
        return kl.sum()
    return kl.sum(dim=dim)


def gaussian_log_prob(dist: DiagGaussian, y: Tensor) -> Tensor:
    """Elementwise log N(y; mean, var)."""
    return -0.5 * (LOG_2PI + torch.log(dist.var) + (y - dist.mean) ** 2 / dist.var)


def gaussian_nll_diag(dist: DiagGaussian, y: Tensor) -> Tensor:
    """``-sum log N(y; mean, var)`` over all elements."""
    if dist.mean.shape != y.shape:
        raise DimensionError(
            f"target shape {tuple(y.shape)} != mean shape {tuple(dist.mean.shape)}"
        )
    dist._check_positive()
    return -gaussian_log_prob(dist, y).sum()


def categorical_nll(probs: Tensor, y, atol: float = 1e-6) -> Tensor:
    """``-log probs[y]`` for probabilities on the simplex (last axis).

    ``y`` is an integer class index or a tensor of indices matching
    ``probs.shape[:-1]``; the result is summed over all indexed items.
    """
    n_classes = probs.shape[-1]
    y = torch.as_tensor(y, dtype=torch.long, device=probs.device)
    if bool(((y < 0) | (y >= n_classes)).any()):
        raise IndexError(f"class index out of range [0, {n_classes})")
    total = probs.sum(dim=-1)
    if bool(((total - 1.0).abs() > atol).any()):
        raise DomainError("probabilities do not sum to 1")
    if y.dim() == 0:
        return -torch.log(probs[..., y]).sum()
    picked = torch.gather(probs, -1, y.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked).sum()


def categorical_nll_from_logits(logits: Tensor, y: Tensor) -> Tensor:
    """Elementwise ``-log_softmax(logits)[y]``; numerically stable form."""
    y = y.long()
    logp = torch.log_softmax(logits, dim=-1)
    return -torch.gather(logp, -1, y.unsqueeze(-1)).squeeze(-1)
