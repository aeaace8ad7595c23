"""Encoders and decoder for STNP, JTNP, MTNP and their ablations.

Per-task tensors are laid out as ``(B, S, ..., width)`` where ``S`` is the
number of task slots: ``T`` for STNP/MTNP, 1 for JTNP (whose single slot
sees all outputs concatenated). Task-specific parameterization groups the
layers over that axis.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from mtnp.datasets.batch import MultiTaskBatch
from mtnp.diffcore import (
    MLP,
    CrossAttentionStack,
    DiagGaussian,
    Linear,
    Pool,
    SelfAttentionStack,
    bounded_std,
    reparam_sample,
)
from mtnp.errors import CompletenessError, ConfigError, StateError
from mtnp.models.variant import ModelDims, ModelVariant, TaskSpec


@dataclass
class LatentState:
    """Latent distributions and the samples drawn from them.

    ``z_dist`` has shape ``(B, width)``; ``v_dist`` covers all task slots at
    once with shape ``(B, S, width)``. Samples carry a leading sample axis.
    """

    z_dist: Optional[DiagGaussian] = None
    v_dist: Optional[DiagGaussian] = None
    z_sample: Optional[Tensor] = None
    v_sample: Optional[Tensor] = None


@dataclass
class PredictiveParams:
    """Per target point and task predictive distributions for ``K`` latent draws.

    ``mean``/``var`` have shape ``(K, B, N, T)`` and are meaningful for
    continuous tasks; ``logits`` has shape ``(K, B, N, T, C)`` when any task
    is categorical (columns past a task's class count are unused).
    """

    mean: Tensor
    var: Tensor
    logits: Optional[Tensor]
    tasks: Sequence[TaskSpec]

    @property
    def n_samples(self) -> int:
        return self.mean.shape[0]

    def probs(self, t: int) -> Tensor:
        k = self.tasks[t].n_classes
        return torch.softmax(self.logits[..., t, :k], dim=-1)

    def gaussian(self) -> DiagGaussian:
        return DiagGaussian(self.mean, self.var)

    def sample(self, k: int) -> "PredictiveParams":
        sl = slice(k, k + 1)
        return PredictiveParams(self.mean[sl], self.var[sl],
                                None if self.logits is None else self.logits[sl], self.tasks)


class NeuralProcessModel(nn.Module):
    def __init__(self, variant: ModelVariant, dims: ModelDims, tasks: Sequence[TaskSpec],
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.variant, self.dims, self.tasks = variant, dims, tuple(tasks)
        T = len(self.tasks)
        if T < 1:
            raise ConfigError("at least one task is required")
        d, h, g = dims.width, dims.heads, generator
        joint = variant.family == "jtnp"
        self.n_slots = 1 if joint else T
        groups = T if variant.sharing == "task_specific" else 1
        self.groups = groups
        if joint:
            self.y_width = sum(t.input_width for t in self.tasks)
            self.head_width = sum(t.output_width for t in self.tasks)
        else:
            self.y_width = max(t.input_width for t in self.tasks)
            self.head_width = max(t.output_width for t in self.tasks)
        in_width = dims.x_dim + self.y_width

        if variant.uses_task_embedding:
            if variant.task_embedding == "learnable":
                self.task_embedding = nn.Parameter(0.5 * torch.randn(T, d, generator=g))
            else:
                if T > d:
                    raise ConfigError(f"one-hot embedding needs width >= {T}")
                self.register_buffer("task_embedding", torch.eye(T, d))
        else:
            self.task_embedding = None

        # per-task branches: parameters grouped over tasks when task-specific
        branch = nn.ModuleDict()
        shared = nn.ModuleDict()
        if variant.uses_latent:
            branch["psi_s"] = MLP(in_width, d, d, dims.psi_s_layers, groups, g)
            if variant.self_attention:
                depth = dims.global_attn if joint else dims.per_task_attn
                branch["latent_attn"] = SelfAttentionStack(d, h, depth, groups, g)
            branch["latent_pool"] = Pool(variant.pooling, d, h, groups, g)
            if variant.has_task_latent:
                v_in = 2 * d if variant.has_global_latent else d
                branch["v_head"] = MLP(v_in, d, 2 * d, dims.latent_head_layers, groups, g)
            if variant.has_global_latent:
                if not joint:
                    if variant.self_attention:
                        shared["across_latent_attn"] = SelfAttentionStack(d, h, dims.across_task_attn, 1, g)
                    shared["across_pool"] = Pool(variant.pooling, d, h, 1, g)
                shared["z_head"] = MLP(d, d, 2 * d, dims.latent_head_layers, 1, g)
        if variant.uses_deterministic:
            branch["psi_d"] = MLP(in_width, d, d, dims.psi_d_layers, groups, g)
            branch["x_embed"] = Linear(dims.x_dim, d, groups, g)
            depth = dims.global_attn if joint else dims.per_task_attn
            branch["cross_attn"] = CrossAttentionStack(d, h, depth, groups, g)
            if variant.family == "mtnp":
                shared["across_det_attn"] = SelfAttentionStack(d, h, dims.across_task_attn, 1, g)
        branch["psi_w"] = MLP(dims.x_dim, d, d, dims.psi_w_layers, groups, g)
        dec_in = d + (d if variant.uses_latent else 0) + (d if variant.uses_deterministic else 0)
        branch["psi_y"] = MLP(dec_in, d, self.head_width, dims.psi_y_layers, groups, g)
        self.branch = branch
        self.shared = shared

    # ------------------------------------------------------------------ helpers

    def _emb(self, ndim: int) -> Tensor:
        if self.task_embedding is None:
            return 0.0
        e = self.task_embedding
        return e.view(1, e.shape[0], *([1] * (ndim - 3)), e.shape[1])

    def _slot_features(self, x: Tensor, y: Tensor, mask: Tensor):
        """Per-slot encoder inputs ``(B, S, N, dx + y_width)`` and key masks ``(B, S, N)``."""
        B, N, T = y.shape
        y = torch.where(mask, y, torch.zeros((), dtype=y.dtype))
        encoded = []
        for t, spec in enumerate(self.tasks):
            yt = y[..., t:t + 1]
            if spec.kind == "categorical":
                yt = F.one_hot(yt.squeeze(-1).long(), spec.n_classes).to(y.dtype)
            encoded.append(yt)
        if self.n_slots == 1:
            feats = torch.cat([x] + encoded, dim=-1).unsqueeze(1)
            key_mask = mask.any(-1).unsqueeze(1)
        else:
            slots = [F.pad(e, (0, self.y_width - e.shape[-1])) for e in encoded]
            ys = torch.stack(slots, dim=1)
            feats = torch.cat([x.unsqueeze(1).expand(B, T, N, x.shape[-1]), ys], dim=-1)
            key_mask = mask.permute(0, 2, 1)
        return feats, key_mask

    def _expand_x(self, x: Tensor) -> Tensor:
        return x.unsqueeze(1).expand(x.shape[0], self.n_slots, *x.shape[1:])

    def _dist(self, raw: Tensor) -> DiagGaussian:
        mean, raw_std = raw.chunk(2, dim=-1)
        return DiagGaussian.from_raw(mean, raw_std)

    def _check_context(self, batch: MultiTaskBatch, need_target: bool = False):
        batch.check_nonempty()
        if self.variant.requires_complete_context:
            if not batch.context_complete():
                raise CompletenessError("jtnp needs every task observed at every context point")
            if need_target and not batch.target_complete():
                raise CompletenessError("jtnp needs a complete target set")

    # ------------------------------------------------------------------ encoders

    def summarize(self, x: Tensor, y: Tensor, mask: Tensor):
        """Per-slot summaries ``(B, S, d)`` and, with a global latent, the set summary ``(B, d)``."""
        feats, key_mask = self._slot_features(x, y, mask)
        h = self.branch["psi_s"](feats) + self._emb(4)
        if "latent_attn" in self.branch:
            h = self.branch["latent_attn"](h, key_mask)
        s_task = self.branch["latent_pool"](h, key_mask)
        s_all = None
        if self.variant.has_global_latent:
            if self.n_slots == 1:
                s_all = s_task[:, 0]
            else:
                a = s_task
                if "across_latent_attn" in self.shared:
                    a = self.shared["across_latent_attn"](a)
                s_all = self.shared["across_pool"](a)
        return s_task, s_all

    def z_distribution(self, s_all: Tensor) -> DiagGaussian:
        return self._dist(self.shared["z_head"](s_all))

    def v_distribution(self, s_task: Tensor, z: Optional[Tensor] = None) -> DiagGaussian:
        """``q(v | s_task, z)``. ``z`` may carry a leading sample axis ``(K, B, d)``."""
        if z is None or not self.variant.has_global_latent:
            return self._dist(self.branch["v_head"](s_task))
        K = z.shape[0] if z.dim() == 3 else 1
        z = z.reshape(-1, z.shape[-1])
        s = s_task.repeat(K, 1, 1)
        inp = torch.cat([s, z.unsqueeze(1).expand(-1, s.shape[1], -1)], dim=-1)
        dist = self._dist(self.branch["v_head"](inp))
        if K > 1 or z.shape[0] != s_task.shape[0]:
            shape = (K, s_task.shape[0]) + dist.mean.shape[1:]
            return DiagGaussian(dist.mean.reshape(shape), dist.var.reshape(shape))
        return dist

    def encode_deterministic(self, batch: MultiTaskBatch) -> Tensor:
        """Target-specific representations ``(B, S, Nt, d)`` built from the context."""
        feats, key_mask = self._slot_features(batch.x_context, batch.y_context, batch.mask_context)
        emb = self._emb(4)
        values = self.branch["psi_d"](feats) + emb
        keys = self.branch["x_embed"](self._expand_x(batch.x_context)) + emb
        queries = self.branch["x_embed"](self._expand_x(batch.x_target)) + emb
        u = self.branch["cross_attn"](queries, keys, values, key_mask)
        if "across_det_attn" in self.shared:
            r = self.shared["across_det_attn"](u.transpose(1, 2))
            u = r.transpose(1, 2)
        return u

    def encode_latent(self, batch: MultiTaskBatch, generator: Optional[torch.Generator] = None,
                      source: str = "context", noise_scale: float = 1.0) -> LatentState:
        """Ancestral sampling of one latent draw from ``q(. | context)`` or ``q(. | target)``."""
        if not self.variant.uses_latent:
            raise StateError("deterministic-only variant has no latent variables")
        if source == "context":
            self._check_context(batch)
            x, y, m = batch.x_context, batch.y_context, batch.mask_context
        else:
            x, y, m = batch.x_target, batch.y_target, batch.mask_target
        s_task, s_all = self.summarize(x, y, m)
        state = LatentState()
        if self.variant.has_global_latent:
            state.z_dist = self.z_distribution(s_all)
            eps = torch.randn(state.z_dist.mean.shape, generator=generator, dtype=s_task.dtype) * noise_scale
            state.z_sample = reparam_sample(state.z_dist, eps).unsqueeze(0)
        if self.variant.has_task_latent:
            state.v_dist = self.v_distribution(s_task, state.z_sample)
            if state.v_dist.mean.dim() == 4:
                state.v_dist = DiagGaussian(state.v_dist.mean[0], state.v_dist.var[0])
            eps = torch.randn(state.v_dist.mean.shape, generator=generator, dtype=s_task.dtype) * noise_scale
            state.v_sample = reparam_sample(state.v_dist, eps).unsqueeze(0)
        return state

    # ------------------------------------------------------------------ decoder

    def decoder_latent(self, state: LatentState) -> Optional[Tensor]:
        """Latent fed to the decoder, ``(K, B, S, d)``: ``v`` when present, else ``z`` per slot."""
        if not self.variant.uses_latent:
            return None
        if state.v_sample is not None:
            return state.v_sample
        z = state.z_sample
        if z is None:
            raise StateError("no latent sample drawn")
        return z.unsqueeze(2).expand(*z.shape[:2], self.n_slots, z.shape[-1])

    def decode(self, x_target: Tensor, latent: Optional[Tensor], r: Optional[Tensor]) -> PredictiveParams:
        """Predictive parameters for ``K`` latent draws (``latent``: ``(K, B, S, d)``)."""
        if self.variant.uses_deterministic and r is None:
            raise StateError("deterministic path enabled but no representation given")
        if self.variant.uses_latent and latent is None:
            raise StateError("latent path enabled but no latent sample given")
        d = self.dims.width
        w = self.branch["psi_w"](self._expand_x(x_target)) + self._emb(4)
        psi_y = self.branch["psi_y"]
        first = psi_y.layers[0]
        # the first decoder layer acts on [w, latent, r]; split it so the
        # sample-independent parts are computed once
        W, bias = first.weight, first.bias
        col = 0

        def part(inp, width):
            nonlocal col
            Wp = W[:, col:col + width]
            col += width
            if first.groups == 1:
                return inp @ Wp[0]
            lead = inp.shape
            flat = inp.reshape(inp.shape[0], first.groups, -1, width)
            return torch.einsum("bgmi,gio->bgmo", flat, Wp).reshape(*lead[:-1], Wp.shape[-1])

        h = part(w, d)
        lat_h = None
        if self.variant.uses_latent:
            lat_h = part(latent.reshape(-1, *latent.shape[2:]), d).reshape(*latent.shape[:3], -1)
        if self.variant.uses_deterministic:
            h = h + part(r, d)
        b = bias[0] if first.groups == 1 else bias.view(1, first.groups, 1, -1)
        h = (h + b).unsqueeze(0)
        if lat_h is not None:
            h = h + lat_h.unsqueeze(3)
        K = h.shape[0]
        h = h.reshape(-1, *h.shape[2:])
        for layer in psi_y.layers[1:]:
            h = layer(F.relu(h))
        out = h.reshape(K, -1, *h.shape[1:])            # (K, B, S, N, head)
        return self._to_params(out.permute(0, 1, 3, 2, 4))

    def _to_params(self, out: Tensor) -> PredictiveParams:
        """Split raw decoder heads ``(K, B, N, S, head)`` into per-task parameters."""
        T = len(self.tasks)
        means, stds, logits = [], [], []
        max_classes = max((t.n_classes for t in self.tasks), default=0)
        offset = 0
        for t, spec in enumerate(self.tasks):
            if self.n_slots == 1:
                o = out[..., 0, offset:offset + spec.output_width]
                offset += spec.output_width
            else:
                o = out[..., t, :]
            if spec.kind == "continuous":
                means.append(o[..., 0])
                stds.append(bounded_std(o[..., 1]))
                if max_classes:
                    logits.append(torch.zeros(*o.shape[:-1], max_classes, dtype=o.dtype))
            else:
                means.append(torch.zeros_like(o[..., 0]))
                stds.append(torch.ones_like(o[..., 0]))
                logits.append(F.pad(o[..., :spec.n_classes], (0, max_classes - spec.n_classes)))
        mean = torch.stack(means, dim=-1)
        std = torch.stack(stds, dim=-1)
        lg = torch.stack(logits, dim=-2) if max_classes else None
        return PredictiveParams(mean, std * std, lg, self.tasks)

    # ------------------------------------------------------------------ prediction

    def n_predictive_samples(self, n_z: int, n_v: int) -> int:
        v = self.variant
        if not v.uses_latent:
            return 1
        if v.has_global_latent and v.has_task_latent:
            return n_z * n_v
        return n_z if v.has_global_latent else n_v

    def predict(self, batch: MultiTaskBatch, n_z: int = 5, n_v: int = 5, map_mode: bool = False,
                generator: Optional[torch.Generator] = None, noise_scale: float = 1.0) -> PredictiveParams:
        """Ancestral Monte-Carlo predictive parameters conditioned on the context.

        Hierarchical MTNP draws ``n_z`` global latents and ``n_v`` task
        latents per global draw; models with a single latent level draw
        ``n_z`` (global) or ``n_v`` (per-task) samples. ``map_mode`` uses
        posterior means instead and returns a single parameter set.
        """
        self._check_context(batch)
        r = self.encode_deterministic(batch) if self.variant.uses_deterministic else None
        latent = None
        if self.variant.uses_latent:
            s_task, s_all = self.summarize(batch.x_context, batch.y_context, batch.mask_context)
            dtype = s_task.dtype
            z = None
            if self.variant.has_global_latent:
                zd = self.z_distribution(s_all)
                if map_mode:
                    z = zd.mean.unsqueeze(0)
                else:
                    eps = torch.randn((n_z,) + zd.mean.shape, generator=generator, dtype=dtype) * noise_scale
                    z = zd.mean + zd.std * eps
                latent = z.unsqueeze(2).expand(*z.shape[:2], self.n_slots, z.shape[-1])
            if self.variant.has_task_latent:
                per = 1 if map_mode else n_v
                zz = None if z is None else z.repeat_interleave(per, dim=0)
                vd = self.v_distribution(s_task, zz)
                mean, std = vd.mean, vd.std
                if mean.dim() == 3:
                    mean, std = mean.unsqueeze(0).expand(per, *mean.shape), std.unsqueeze(0).expand(per, *std.shape)
                if map_mode:
                    latent = mean
                else:
                    eps = torch.randn(mean.shape, generator=generator, dtype=dtype) * noise_scale
                    latent = mean + std * eps
        return self.decode(batch.x_target, latent, r)


def build_model(variant: ModelVariant, dims: ModelDims, tasks: Sequence[TaskSpec], seed: int = 0,
                dtype: torch.dtype = torch.float32) -> NeuralProcessModel:
    """Construct and deterministically initialize a model from ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    model = NeuralProcessModel(variant, dims, tasks, gen)
    return model.to(dtype)


def per_task_parameter_count(model: NeuralProcessModel) -> int:
    return sum(p.numel() for p in model.branch.parameters())


def parameter_names(model: nn.Module) -> List[str]:
    return [n for n, _ in model.named_parameters()]
