"""Differentiable building blocks on top of torch tensors."""

from mtnp.diffcore.distributions import (
    DiagGaussian,
    bounded_std,
    categorical_nll,
    categorical_nll_from_logits,
    gaussian_kl_diag,
    gaussian_log_prob,
    gaussian_nll_diag,
    reparam_sample,
)
from mtnp.diffcore.layers import (
    MLP,
    PMA,
    CrossAttentionStack,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    Pool,
    SelfAttentionStack,
    fused_multi_head_attention,
    mlp_forward,
    multi_head_attention,
    pool,
    scaled_dot_attention,
)
from mtnp.diffcore.optim import Adam, adam_step, clip_grad_norm

__all__ = [
    "Adam",
    "CrossAttentionStack",
    "DiagGaussian",
    "LayerNorm",
    "Linear",
    "MLP",
    "MultiHeadAttention",
    "PMA",
    "Pool",
    "SelfAttentionStack",
    "adam_step",
    "bounded_std",
    "categorical_nll",
    "categorical_nll_from_logits",
    "clip_grad_norm",
    "fused_multi_head_attention",
    "gaussian_kl_diag",
    "gaussian_log_prob",
    "gaussian_nll_diag",
    "mlp_forward",
    "multi_head_attention",
    "pool",
    "reparam_sample",
    "scaled_dot_attention",
]
