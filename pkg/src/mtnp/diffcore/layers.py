"""Parameterized layers: MLPs, multi-head attention blocks and set pooling.

Every layer takes a ``groups`` argument. With ``groups == 1`` the weights
are shared along all leading axes. With ``groups == G`` the input must
carry a group axis at dim 1, i.e. shape ``(B, G, ..., features)``, and each
group gets its own weights. This is how task-specific (per-task) branches
are parameterized without a Python loop over tasks.
"""

import math
from typing import Optional

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from mtnp.errors import ConfigError, DimensionError, EmptyContextError


def _group_view(param: Tensor, x: Tensor) -> Tensor:
    """Broadcast a ``(G, ...)`` parameter against ``x`` with group axis at dim 1."""
    if param.shape[0] == 1:
        return param[0]
    extra = x.dim() - 2 - (param.dim() - 1)
    return param.view(1, param.shape[0], *([1] * extra), *param.shape[1:])


class Linear(nn.Module):
    """Affine map with optional per-group weights.

    Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start
    at zero.
    """

    def __init__(self, d_in: int, d_out: int, groups: int = 1, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.d_in, self.d_out, self.groups = d_in, d_out, groups
        bound = 1.0 / math.sqrt(d_in)
        weight = (torch.rand(groups, d_in, d_out, generator=generator) * 2.0 - 1.0) * bound
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(groups, d_out))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"expected last dim {self.d_in}, got {x.shape[-1]}")
        if self.groups == 1:
            return x @ self.weight[0] + self.bias[0]
        if x.dim() < 3 or x.shape[1] != self.groups:
            raise DimensionError(
                f"grouped linear needs shape (B, {self.groups}, ..., {self.d_in}), got {tuple(x.shape)}"
            )
        lead = x.shape[:-1]
        h = x.reshape(x.shape[0], self.groups, -1, self.d_in)
        out = torch.einsum("bgmi,gio->bgmo", h, self.weight) + self.bias[None, :, None, :]
        return out.reshape(*lead, self.d_out)

    def extra_repr(self):
        return f"d_in={self.d_in}, d_out={self.d_out}, groups={self.groups}"


class LayerNorm(nn.Module):
    def __init__(self, width: int, groups: int = 1, eps: float = 1e-5):
        super().__init__()
        self.width, self.eps = width, eps
        self.gain = nn.Parameter(torch.ones(groups, width))
        self.shift = nn.Parameter(torch.zeros(groups, width))

    def forward(self, x: Tensor) -> Tensor:
        h = F.layer_norm(x, (self.width,), eps=self.eps)
        return h * _group_view(self.gain, x) + _group_view(self.shift, x)


class MLP(nn.Module):
    """``layer_count`` affine layers of hidden width ``width`` with ReLU between them."""

    def __init__(self, d_in: int, width: int, d_out: int, layer_count: int, groups: int = 1, generator=None):
        super().__init__()
        if layer_count < 1:
            raise ConfigError("an MLP needs at least one layer")
        dims = [d_in] + [width] * (layer_count - 1) + [d_out]
        self.layers = nn.ModuleList(
            Linear(a, b, groups, generator) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i:
                x = F.relu(x)
            x = layer(x)
        return x


def mlp_forward(params: MLP, x: Tensor) -> Tensor:
    """Functional alias for ``params(x)``."""
    return params(x)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
    """Softmax attention along the key axis (dim -2).

    ``key_mask`` is boolean with shape ``k.shape[:-1]``; masked keys get a
    logit of -inf. Every query must see at least one unmasked key.
    """
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("keys and values must have the same set size")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return weights @ v


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, key_mask: Optional[Tensor] = None) -> Tensor:
    """Split the feature axis into ``heads`` and attend per head (no projections)."""
    width = q.shape[-1]
    if width % heads:
        raise ConfigError(f"width {width} not divisible by {heads} heads")

    def split(t):
        return t.reshape(*t.shape[:-1], heads, width // heads).transpose(-2, -3)

    mask = None if key_mask is None else key_mask.unsqueeze(-2)
    out = scaled_dot_attention(split(q), split(k), split(v), mask)
    out = out.transpose(-2, -3)
    return out.reshape(*out.shape[:-2], width)


def fused_multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                               key_mask: Optional[Tensor] = None) -> Tensor:
    """Same contract as :func:`multi_head_attention`, via torch's fused kernel."""
    width = q.shape[-1]
    if width % heads:
        raise ConfigError(f"width {width} not divisible by {heads} heads")
    lead = q.shape[:-2]

    def split(t):
        t = t.expand(*lead, *t.shape[-2:]) if t.shape[:-2] != lead else t
        return t.reshape(-1, t.shape[-2], heads, width // heads).transpose(1, 2)

    mask = None
    if key_mask is not None:
        mask = key_mask.expand(*lead, key_mask.shape[-1]).reshape(-1, 1, 1, key_mask.shape[-1])
    out = F.scaled_dot_product_attention(split(q), split(k), split(v), attn_mask=mask)
    return out.transpose(1, 2).reshape(*lead, q.shape[-2], width)


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int, groups: int = 1, generator=None):
        super().__init__()
        if width % heads:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(width, width, groups, generator)
        self.k_proj = Linear(width, width, groups, generator)
        self.v_proj = Linear(width, width, groups, generator)
        self.out_proj = Linear(width, width, groups, generator)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        h = fused_multi_head_attention(self.q_proj(q), self.k_proj(k), self.v_proj(v), self.heads, key_mask)
        return self.out_proj(h)


class FeedForward(nn.Module):
    def __init__(self, width: int, groups: int = 1, generator=None):
        super().__init__()
        self.inner = Linear(width, width, groups, generator)
        self.outer = Linear(width, width, groups, generator)

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(F.relu(self.inner(x)))


class SelfAttentionStack(nn.Module):
    """Pre-norm self-attention blocks with residual attention and feed-forward sublayers."""

    def __init__(self, width: int, heads: int, depth: int, groups: int = 1, generator=None):
        super().__init__()
        self.blocks = nn.ModuleList()
        for _ in range(depth):
            self.blocks.append(nn.ModuleDict({
                "norm_attn": LayerNorm(width, groups),
                "attn": MultiHeadAttention(width, heads, groups, generator),
                "norm_ff": LayerNorm(width, groups),
                "ff": FeedForward(width, groups, generator),
            }))

    def forward(self, x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        for block in self.blocks:
            h = block["norm_attn"](x)
            x = x + block["attn"](h, h, h, mask)
            x = x + block["ff"](block["norm_ff"](x))
        return x


class CrossAttentionStack(nn.Module):
    """Stacked cross-attention where queries are refined and keys/values stay fixed.

    The first block carries no residual from the raw query, so the output
    depends on the query only through the attention weights. With a single
    key the result is the same for every query.
    """

    def __init__(self, width: int, heads: int, depth: int, groups: int = 1, generator=None):
        super().__init__()
        self.key_norm = LayerNorm(width, groups)
        self.blocks = nn.ModuleList()
        for _ in range(depth):
            self.blocks.append(nn.ModuleDict({
                "norm_attn": LayerNorm(width, groups),
                "attn": MultiHeadAttention(width, heads, groups, generator),
                "norm_ff": LayerNorm(width, groups),
                "ff": FeedForward(width, groups, generator),
            }))

    def forward(self, queries: Tensor, keys: Tensor, values: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        keys = self.key_norm(keys)
        x = queries
        for i, block in enumerate(self.blocks):
            a = block["attn"](block["norm_attn"](x), keys, values, key_mask)
            x = a if i == 0 else x + a
            x = x + block["ff"](block["norm_ff"](x))
        return x


class MeanPool(nn.Module):
    def forward(self, items: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        return pool(items, "mean", mask=mask)


class PMA(nn.Module):
    """Pooling by multi-head attention with one learned seed query."""

    def __init__(self, width: int, heads: int, groups: int = 1, generator=None):
        super().__init__()
        self.seed = nn.Parameter((torch.rand(groups, width, generator=generator) * 2.0 - 1.0) / math.sqrt(width))
        self.attn = MultiHeadAttention(width, heads, groups, generator)
        self.norm_ff = LayerNorm(width, groups)
        self.ff = FeedForward(width, groups, generator)

    def forward(self, items: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        seed = _group_view(self.seed, items[..., 0, :])
        query = seed.expand(*items.shape[:-2], seed.shape[-1]).unsqueeze(-2)
        h = query + self.attn(query, items, items, mask)
        h = h + self.ff(self.norm_ff(h))
        return h.squeeze(-2)


def pool(items: Tensor, mode: str = "mean", params: Optional[PMA] = None, mask: Optional[Tensor] = None) -> Tensor:
    """Permutation-invariant reduction of a set along dim -2.

    ``mask`` marks the valid items; padded items never contribute.
    """
    if items.shape[-2] == 0:
        raise EmptyContextError("cannot pool an empty set")
    if mask is not None and bool((mask.sum(dim=-1) == 0).any()):
        raise EmptyContextError("cannot pool a set whose items are all masked")
    if mode == "mean":
        if mask is None:
            return items.mean(dim=-2)
        w = mask.to(items.dtype).unsqueeze(-1)
        return (items * w).sum(dim=-2) / w.sum(dim=-2)
    if mode == "pma":
        if params is None:
            raise ConfigError("pma pooling needs a PMA parameter set")
        return params(items, mask)
    raise ConfigError(f"unknown pooling mode {mode!r}")


class Pool(nn.Module):
    def __init__(self, mode: str, width: int, heads: int, groups: int = 1, generator=None):
        super().__init__()
        if mode not in ("mean", "pma"):
            raise ConfigError(f"unknown pooling mode {mode!r}")
        self.mode = mode
        self.pma = PMA(width, heads, groups, generator) if mode == "pma" else None

    def forward(self, items: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        return pool(items, self.mode, self.pma, mask)
