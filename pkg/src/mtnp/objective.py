"""Variational objectives and training schedules.

All three families share one code path: the conditional prior and the
variational posterior are the same encoder applied to the context and to
the target set respectively.
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

from mtnp.datasets.batch import MultiTaskBatch
from mtnp.diffcore import DiagGaussian, categorical_nll_from_logits, gaussian_kl_diag, gaussian_log_prob, reparam_sample
from mtnp.errors import DomainError, EmptyContextError
from mtnp.models.network import NeuralProcessModel, PredictiveParams


@dataclass
class ElboTerms:
    """Batch-averaged components; ``loss = recon + beta * (kl_z + kl_v)`` (optionally per label)."""

    loss: Tensor
    recon: Tensor
    kl_z: Tensor
    kl_v: Tensor
    n_labels: Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach().mean()) for k in ("loss", "recon", "kl_z", "kl_v")}


def predictive_nll(params: PredictiveParams, y: Tensor, mask: Tensor) -> Tensor:
    """Elementwise negative log-likelihood ``(K, B, N, T)``; zero where unobserved."""
    y0 = torch.where(mask, y, torch.zeros((), dtype=y.dtype))
    per = torch.zeros_like(params.mean)
    for t, spec in enumerate(params.tasks):
        if spec.kind == "continuous":
            dist = DiagGaussian(params.mean[..., t], params.var[..., t])
            per[..., t] = -gaussian_log_prob(dist, y0[..., t].expand_as(dist.mean))
        else:
            lg = params.logits[..., t, :spec.n_classes]
            per[..., t] = categorical_nll_from_logits(lg, y0[..., t].expand(lg.shape[:-1]))
    return torch.where(mask, per, torch.zeros((), dtype=per.dtype))


def _kl_or_zero(q: Optional[DiagGaussian], p: Optional[DiagGaussian], batch: int, ref: Tensor) -> Tensor:
    if q is None:
        return torch.zeros(batch, dtype=ref.dtype)
    kl = gaussian_kl_diag(q, p, dim=-1)
    return kl if kl.dim() == 1 else kl.sum(dim=-1)


def elbo(model: NeuralProcessModel, batch: MultiTaskBatch, generator: Optional[torch.Generator] = None,
         beta: float = 1.0, per_label: bool = False, noise_scale: float = 1.0) -> ElboTerms:
    """Single-sample reparameterized estimate of the negated lower bound.

    MTNP: ``z ~ q(z|D)``, then for each task ``v ~ q(v|z, D^t)``; the KL
    terms compare ``q(z|D)`` with ``q(z|C)`` and ``q(v|z, D^t)`` with
    ``q(v|z, C^t)`` for the same ``z``. STNP sums independent per-task
    bounds, JTNP uses a single latent for all tasks.

    With ``per_label`` each item's bound is divided by its number of
    observed target labels before averaging over the batch.
    """
    model._check_context(batch, need_target=True)
    if bool((batch.mask_target.sum(dim=1) == 0).any()):
        raise EmptyContextError("every task needs at least one target point")
    variant = model.variant
    B = batch.batch_size
    r = model.encode_deterministic(batch) if variant.uses_deterministic else None
    latent = None
    q_z = p_z = q_v = p_v = None
    if variant.uses_latent:
        s_task_c, s_all_c = model.summarize(batch.x_context, batch.y_context, batch.mask_context)
        s_task_d, s_all_d = model.summarize(batch.x_target, batch.y_target, batch.mask_target)
        dtype = s_task_d.dtype
        z = None
        if variant.has_global_latent:
            q_z = model.z_distribution(s_all_d)
            p_z = model.z_distribution(s_all_c)
            eps = torch.randn(q_z.mean.shape, generator=generator, dtype=dtype) * noise_scale
            z = reparam_sample(q_z, eps).unsqueeze(0)
        if variant.has_task_latent:
            q_v = model.v_distribution(s_task_d, z)
            p_v = model.v_distribution(s_task_c, z)
            eps = torch.randn(q_v.mean.shape, generator=generator, dtype=dtype) * noise_scale
            latent = reparam_sample(q_v, eps).unsqueeze(0)
        else:
            latent = z.unsqueeze(2).expand(1, B, model.n_slots, z.shape[-1])
    params = model.decode(batch.x_target, latent, r)
    nll = predictive_nll(params, batch.y_target, batch.mask_target)[0]
    recon = nll.sum(dim=(1, 2))
    ref = recon
    kl_z = _kl_or_zero(q_z, p_z, B, ref)
    kl_v = _kl_or_zero(q_v, p_v, B, ref)
    loss = recon + beta * (kl_z + kl_v)
    n_labels = batch.mask_target.sum(dim=(1, 2)).to(loss.dtype)
    if per_label:
        loss, recon, kl_z, kl_v = (t / n_labels for t in (loss, recon, kl_z, kl_v))
    return ElboTerms(loss.mean(), recon.mean(), kl_z.mean(), kl_v.mean(), n_labels)


def elbo_np(model, context_batch, generator=None, beta=1.0, **kw) -> Tensor:
    """Negated bound for the single-level families (STNP sums over tasks; JTNP is joint)."""
    return elbo(model, context_batch, generator, beta, **kw).loss


def elbo_mtnp(model, batch, generator=None, beta=1.0, **kw) -> Tensor:
    return elbo(model, batch, generator, beta, **kw).loss


def lr_schedule(step: int, base_lr: float, warmup: int = 1000, reading: str = "step",
                n_iters: Optional[int] = None) -> float:
    """Linear warmup for ``warmup`` steps, then inverse square-root decay.

    ``base_lr * sqrt(warmup) * min(k * warmup**-1.5, k**-0.5)``, evaluated
    in the algebraically equal form ``base_lr * min(k / warmup, sqrt(warmup / k))``
    so the peak is exactly ``base_lr``. ``k`` is the current step, or the
    total iteration count when ``reading == "total"`` (a constant rate).
    """
    if step < 1:
        raise DomainError("learning-rate schedule is defined for step >= 1")
    if reading == "step":
        k = step
    elif reading == "total":
        if not n_iters:
            raise DomainError("the 'total' reading needs n_iters")
        k = n_iters
    else:
        raise DomainError(f"unknown schedule reading {reading!r}")
    return base_lr * min(k / warmup, math.sqrt(warmup / k))


def beta_schedule(step: int, warmup: int = 10000) -> float:
    if step < 0:
        raise DomainError("step must be nonnegative")
    return min(step / warmup, 1.0)
