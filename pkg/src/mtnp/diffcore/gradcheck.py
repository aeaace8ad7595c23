"""Central finite-difference verification of autograd gradients."""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import torch
from torch import Tensor, nn


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_item: Dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _rel(a: float, b: float, floor: float) -> float:
    # below ``floor`` the comparison is absolute: central differences carry
    # round-off of order |f| * 1e-16 / eps, so exact zeros never come out as 0
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_input_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                          floor: float = 1e-4) -> GradCheckResult:
    """Compare autograd gradients of a scalar ``fn(*inputs)`` with central differences.

    Every coordinate of every input is perturbed; intended for small fp64 tensors.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    worst, per = 0.0, {}
    for idx, (x, g) in enumerate(zip(inputs, analytic)):
        g = torch.zeros_like(x) if g is None else g
        flat = x.detach().view(-1)
        errs = []
        for j in range(flat.numel()):
            orig = flat[j].item()
            with torch.no_grad():
                flat[j] = orig + eps
                hi = fn(*inputs).item()
                flat[j] = orig - eps
                lo = fn(*inputs).item()
                flat[j] = orig
            numeric = (hi - lo) / (2 * eps)
            errs.append(_rel(g.reshape(-1)[j].item(), numeric, floor))
        per[f"input{idx}"] = max(errs) if errs else 0.0
        worst = max(worst, per[f"input{idx}"])
    return GradCheckResult(worst, per)


def check_parameter_gradients(loss_fn: Callable[[], Tensor], module: nn.Module, eps: float = 1e-6,
                              n_coords: int = 2, seed: int = 0, floor: float = 1e-4,
                              names: Optional[List[str]] = None) -> GradCheckResult:
    """Finite-difference check of ``d loss / d param`` for every parameter tensor.

    For each tensor the directional derivative along a random unit direction
    is compared, plus ``n_coords`` randomly chosen coordinates. ``loss_fn``
    must be deterministic (fixed noise) across calls.
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if names is not None:
        params = [(n, p) for n, p in params if n in names]
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst, per = 0.0, {}
    for (name, p), g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        direction = torch.randn(p.shape, generator=gen, dtype=p.dtype)
        direction /= direction.norm()
        probes = [direction]
        for j in torch.randint(0, p.numel(), (min(n_coords, p.numel()),), generator=gen).tolist():
            e = torch.zeros(p.numel(), dtype=p.dtype)
            e[j] = 1.0
            probes.append(e.view(p.shape))
        errs = []
        for u in probes:
            with torch.no_grad():
                p.add_(u, alpha=eps)
                hi = loss_fn().item()
                p.add_(u, alpha=-2 * eps)
                lo = loss_fn().item()
                p.add_(u, alpha=eps)
            numeric = (hi - lo) / (2 * eps)
            errs.append(_rel((g * u).sum().item(), numeric, floor))
        per[name] = max(errs)
        worst = max(worst, per[name])
    return GradCheckResult(worst, per)
