"""Adam updates over a module's named parameters."""

from typing import Dict, Iterable, Optional, Tuple

import torch
from torch import nn

from mtnp.errors import TrainingDiverged


class Adam:
    """Adam with bias correction, keyed by parameter name.

    State is stored per name so it can be checkpointed alongside the
    parameters in a stable order.
    """

    def __init__(self, module: nn.Module, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.module = module
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.exp_avg: Dict[str, torch.Tensor] = {}
        self.exp_avg_sq: Dict[str, torch.Tensor] = {}
        for name, p in self.named_trainable():
            self.exp_avg[name] = torch.zeros_like(p)
            self.exp_avg_sq[name] = torch.zeros_like(p)

    def named_trainable(self) -> Iterable[Tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.module.named_parameters() if p.requires_grad]

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        out = {}
        for name in self.exp_avg:
            out[f"adam.exp_avg.{name}"] = self.exp_avg[name]
            out[f"adam.exp_avg_sq.{name}"] = self.exp_avg_sq[name]
        return out

    def load_state_tensors(self, tensors: Dict[str, torch.Tensor], step_count: int):
        for name in self.exp_avg:
            self.exp_avg[name].copy_(tensors[f"adam.exp_avg.{name}"])
            self.exp_avg_sq[name].copy_(tensors[f"adam.exp_avg_sq.{name}"])
        self.step_count = step_count

    @torch.no_grad()
    def step(self, lr: float, grads: Optional[Dict[str, torch.Tensor]] = None):
        """Apply one update. ``grads`` defaults to each parameter's ``.grad``."""
        named = self.named_trainable()
        if grads is None:
            grads = {n: p.grad for n, p in named if p.grad is not None}
        names = [n for n, _ in named if n in grads]
        params = [p for n, p in named if n in grads]
        g = [grads[n] for n in names]
        if g:
            norms = torch.stack(torch._foreach_norm(g))
            if not bool(torch.isfinite(norms).all()):
                bad = names[int((~torch.isfinite(norms)).nonzero()[0])]
                raise TrainingDiverged(f"non-finite gradient for parameter {bad!r}")
        self.step_count += 1
        if not g:
            return
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        m = [self.exp_avg[n] for n in names]
        v = [self.exp_avg_sq[n] for n in names]
        # batched over parameters; same arithmetic as the per-tensor update
        torch._foreach_mul_(m, b1)
        torch._foreach_add_(m, g, alpha=1.0 - b1)
        torch._foreach_mul_(v, b2)
        torch._foreach_addcmul_(v, g, g, value=1.0 - b2)
        denom = torch._foreach_div(v, bc2)
        torch._foreach_sqrt_(denom)
        torch._foreach_add_(denom, self.eps)
        torch._foreach_addcdiv_(params, m, denom, value=-lr / bc1)


def adam_step(optimizer: Adam, lr: float, grads=None) -> Adam:
    optimizer.step(lr, grads)
    return optimizer


def clip_grad_norm(module: nn.Module, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``."""
    grads = [p.grad for p in module.parameters() if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads)).item()
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total
