"""Finite-difference gradient cases shared by the unit tests and the acceptance run.

Each case returns a ``GradCheckResult``; all computations are fp64.
"""

import numpy as np
import torch

from mtnp.datasets.batch import stack_items
from mtnp.diffcore import (
    MLP,
    PMA,
    CrossAttentionStack,
    DiagGaussian,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    Pool,
    SelfAttentionStack,
    bounded_std,
    categorical_nll,
    categorical_nll_from_logits,
    fused_multi_head_attention,
    gaussian_kl_diag,
    gaussian_nll_diag,
    multi_head_attention,
    pool,
    reparam_sample,
    scaled_dot_attention,
)
from mtnp.diffcore.gradcheck import check_input_gradients, check_parameter_gradients
from mtnp.models.network import build_model
from mtnp.models.variant import ModelDims, TaskSpec, continuous_tasks, preset_names, variant_from_name
from mtnp.objective import elbo

D = torch.float64
OP_TOL = 1e-4
MODEL_TOL = 1e-3
MICRO_DIMS = ModelDims(width=8, heads=2)


def _r(*shape, seed):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


def _pos(*shape, seed):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=D) + 0.3


def _weighted(shape, seed):
    """Random readout so the checked scalar depends on every output coordinate."""
    w = _r(*shape, seed=seed)
    return lambda out: (out * w).sum()


def op_cases():
    """``name -> thunk`` returning a GradCheckResult for each differentiable op."""
    cases = {}
    cases["gaussian_kl_diag"] = lambda: check_input_gradients(
        lambda mq, vq, mp, vp: gaussian_kl_diag(DiagGaussian(mq, vq), DiagGaussian(mp, vp)),
        [_r(4, seed=1), _pos(4, seed=2), _r(4, seed=3), _pos(4, seed=4)])
    cases["gaussian_nll_diag"] = lambda: check_input_gradients(
        lambda m, v, y: gaussian_nll_diag(DiagGaussian(m, v), y),
        [_r(5, seed=1), _pos(5, seed=2), _r(5, seed=3)])
    y = torch.tensor([0, 2, 1])
    cases["categorical_nll_from_logits"] = lambda: check_input_gradients(
        lambda lg: categorical_nll_from_logits(lg, y).sum(), [_r(3, 4, seed=1)])
    cases["categorical_nll"] = lambda: check_input_gradients(
        lambda lg: categorical_nll(torch.softmax(lg, -1), y), [_r(3, 4, seed=2)])
    read = _weighted((6,), 9)
    cases["reparam_sample"] = lambda: check_input_gradients(
        lambda m, v, e: read(reparam_sample(DiagGaussian(m, v), e)),
        [_r(6, seed=1), _pos(6, seed=2), _r(6, seed=3)])
    cases["bounded_std"] = lambda: check_input_gradients(lambda x: read(bounded_std(x)), [_r(6, seed=4)])
    read_att = _weighted((2, 3, 8), 9)
    qkv = lambda: [_r(2, 3, 8, seed=1), _r(2, 5, 8, seed=2), _r(2, 5, 8, seed=3)]
    cases["scaled_dot_attention"] = lambda: check_input_gradients(
        lambda q, k, v: read_att(scaled_dot_attention(q, k, v)), qkv())
    cases["multi_head_attention"] = lambda: check_input_gradients(
        lambda q, k, v: read_att(multi_head_attention(q, k, v, 2)), qkv())
    cases["fused_multi_head_attention"] = lambda: check_input_gradients(
        lambda q, k, v: read_att(fused_multi_head_attention(q, k, v, 2)), qkv())
    mask = torch.tensor([[True, True, False, True, True], [True, False, True, True, True]])
    read_pool = _weighted((2, 8), 8)
    cases["pool_mean"] = lambda: check_input_gradients(
        lambda x: read_pool(pool(x, "mean", mask=mask)), [_r(2, 5, 8, seed=5)])

    def module_case(build, x_shapes, out_shape):
        def run():
            gen = torch.Generator().manual_seed(0)
            mod = build(gen).to(D)
            xs = [_r(*s, seed=10 + i) for i, s in enumerate(x_shapes)]
            rd = _weighted(out_shape, 7)
            res_p = check_parameter_gradients(lambda: rd(mod(*xs)), mod, n_coords=3)
            res_x = check_input_gradients(lambda *a: rd(mod(*a)), xs)
            res_p.per_item.update({f"x.{k}": v for k, v in res_x.per_item.items()})
            res_p.max_rel_error = max(res_p.max_rel_error, res_x.max_rel_error)
            return res_p
        return run

    cases["linear_grouped"] = module_case(lambda g: Linear(4, 3, groups=2, generator=g), [(2, 2, 3, 4)], (2, 2, 3, 3))
    cases["mlp_forward"] = module_case(lambda g: MLP(3, 8, 2, 3, generator=g), [(4, 3)], (4, 2))
    cases["layer_norm"] = module_case(lambda g: LayerNorm(8), [(3, 8)], (3, 8))
    cases["attention_module"] = module_case(lambda g: MultiHeadAttention(8, 2, generator=g),
                                            [(2, 3, 8), (2, 4, 8), (2, 4, 8)], (2, 3, 8))
    cases["self_attention_stack"] = module_case(lambda g: SelfAttentionStack(8, 2, 2, generator=g),
                                                [(2, 4, 8)], (2, 4, 8))
    cases["cross_attention_stack"] = module_case(lambda g: CrossAttentionStack(8, 2, 2, generator=g),
                                                 [(2, 3, 8), (2, 4, 8), (2, 4, 8)], (2, 3, 8))
    cases["pool_pma"] = module_case(lambda g: Pool("pma", 8, 2, generator=g), [(2, 5, 8)], (2, 8))
    cases["pma"] = module_case(lambda g: PMA(8, 2, generator=g), [(2, 5, 8)], (2, 8))
    return cases


def micro_batch(n_tasks: int = 2, complete: bool = False, categorical: bool = False):
    """Two items, 3 target points, 2 context points; one context label missing unless ``complete``."""
    rng = np.random.default_rng(0)
    contexts, targets = [], []
    for _ in range(2):
        x = rng.uniform(-2, 2, 3)
        y = rng.normal(size=(3, n_tasks))
        if categorical:
            y[:, -1] = rng.integers(0, 3, 3)
        mc = np.ones((2, n_tasks), bool)
        if not complete:
            mc[1, 0] = False
        contexts.append((x[:2], y[:2], mc))
        targets.append((x, y, np.ones((3, n_tasks), bool)))
    return stack_items(contexts, targets, dtype=D)


def micro_model(name: str, categorical: bool = False):
    tasks = continuous_tasks(["t0", "t1"])
    if categorical:
        tasks = (tasks[0], TaskSpec("t1", "categorical", 3))
    model = build_model(variant_from_name(name), MICRO_DIMS, tasks, seed=0, dtype=D)
    # zero-initialized biases put whole rows exactly on a ReLU kink whenever the
    # previous layer is dead there; finite differences are only defined off it
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for pname, p in model.named_parameters():
            if pname.endswith("bias"):
                p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=D))
    return model


def elbo_case(name: str, categorical: bool = False, beta: float = 1.0, n_coords: int = 2):
    model = micro_model(name, categorical)
    batch = micro_batch(complete=model.variant.requires_complete_context, categorical=categorical)

    def loss():
        gen = torch.Generator().manual_seed(3)
        return elbo(model, batch, gen, beta=beta, per_label=True).loss

    return check_parameter_gradients(loss, model, n_coords=n_coords)


def model_cases(n_coords: int = 2):
    """ELBO gradient checks for every preset; ``n_coords=0`` probes one random direction per tensor."""
    cases = {name: (lambda n=name: elbo_case(n, n_coords=n_coords)) for name in preset_names()}
    cases["mtnp+categorical"] = lambda: elbo_case("mtnp", categorical=True, n_coords=n_coords)
    cases["jtnp+categorical"] = lambda: elbo_case("jtnp", categorical=True, n_coords=n_coords)
    return cases
