import pytest
import torch

from gradient_suite import MODEL_TOL, OP_TOL, model_cases, op_cases
from mtnp.diffcore.gradcheck import check_input_gradients, check_parameter_gradients

OPS = op_cases()
MODELS = model_cases()


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient(name):
    res = OPS[name]()
    assert res.passed(OP_TOL), res.per_item


@pytest.mark.parametrize("name", sorted(MODELS))
def test_elbo_gradient_micro_model(name):
    res = MODELS[name]()
    assert res.per_item, "no parameters were checked"
    assert res.passed(MODEL_TOL), {k: v for k, v in res.per_item.items() if v >= MODEL_TOL}


class _WrongSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return 3.0 * x * g  # should be 2x


def test_checker_detects_wrong_gradient():
    x = torch.tensor([0.5, -1.2], dtype=torch.float64)
    assert not check_input_gradients(lambda t: _WrongSquare.apply(t).sum(), [x]).passed(0.1)
    assert check_input_gradients(lambda t: (t * t).sum(), [x]).passed(1e-8)


def test_parameter_checker_detects_wrong_gradient():
    lin = torch.nn.Linear(2, 1).double()
    x = torch.tensor([[0.3, 0.7]], dtype=torch.float64)
    assert not check_parameter_gradients(lambda: _WrongSquare.apply(lin(x)).sum(), lin).passed(0.1)
    assert check_parameter_gradients(lambda: (lin(x) ** 2).sum(), lin).passed(1e-6)
