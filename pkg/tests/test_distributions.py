import math

import numpy as np
import pytest
import torch

from mtnp.diffcore import (
    DiagGaussian,
    bounded_std,
    categorical_nll,
    categorical_nll_from_logits,
    gaussian_kl_diag,
    gaussian_nll_diag,
    reparam_sample,
)
from mtnp.errors import DimensionError, DomainError

D = torch.float64


def g(mean, var):
    return DiagGaussian(torch.as_tensor(mean, dtype=D), torch.as_tensor(var, dtype=D))


class TestKL:
    def test_identity_is_zero(self):
        assert gaussian_kl_diag(g([0.0], [1.0]), g([0.0], [1.0])).item() == 0.0

    def test_unit_shift_is_half(self):
        assert gaussian_kl_diag(g([1.0], [1.0]), g([0.0], [1.0])).item() == pytest.approx(0.5, abs=1e-15)

    def test_matches_hand_formula(self):
        # ½[(μq-μp)²/σp² + σq²/σp² - 1 - ln(σq²/σp²)] with μq=0.3, σq²=0.5, μp=-0.2, σp²=2
        expected = 0.5 * (0.25 / 2.0 + 0.25 - 1.0 - math.log(0.25))
        got = gaussian_kl_diag(g([0.3], [0.5]), g([-0.2], [2.0])).item()
        assert got == pytest.approx(expected, rel=1e-14)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(3)
        mq, mp = rng.normal(size=3), rng.normal(size=3)
        vq, vp = rng.uniform(0.3, 2.0, 3), rng.uniform(0.3, 2.0, 3)
        x = mq + np.sqrt(vq) * rng.standard_normal((200_000, 3))
        logq = -0.5 * (np.log(2 * np.pi * vq) + (x - mq) ** 2 / vq)
        logp = -0.5 * (np.log(2 * np.pi * vp) + (x - mp) ** 2 / vp)
        terms = (logq - logp).sum(axis=1)
        se = terms.std() / np.sqrt(len(terms))
        kl = gaussian_kl_diag(g(mq, vq), g(mp, vp)).item()
        assert abs(kl - terms.mean()) < 3 * se

    def test_nonnegative_random(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(50):
            q = g(torch.randn(5, generator=gen, dtype=D), torch.rand(5, generator=gen, dtype=D) + 0.05)
            p = g(torch.randn(5, generator=gen, dtype=D), torch.rand(5, generator=gen, dtype=D) + 0.05)
            assert gaussian_kl_diag(q, p).item() >= 0.0
            assert abs(gaussian_kl_diag(q, q).item()) < 1e-10

    def test_per_item_reduction(self):
        q, p = g(torch.zeros(2, 3), torch.ones(2, 3)), g(torch.ones(2, 3), torch.ones(2, 3))
        assert torch.allclose(gaussian_kl_diag(q, p, dim=-1), torch.full((2,), 1.5, dtype=D))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            gaussian_kl_diag(g([0.0], [1.0]), g([0.0, 0.0], [1.0, 1.0]))


class TestGaussianNLL:
    def test_standard_normal_at_zero(self):
        assert gaussian_nll_diag(g([0.0], [1.0]), torch.zeros(1, dtype=D)).item() == pytest.approx(0.918939, abs=1e-6)

    def test_minimized_at_mean(self):
        d = g([0.7], [0.3])
        ys = torch.linspace(-1, 2, 301, dtype=D)
        nll = torch.stack([gaussian_nll_diag(d, y.view(1)) for y in ys])
        assert ys[nll.argmin()].item() == pytest.approx(0.7, abs=1e-9)

    def test_doubling_sigma_adds_log2(self):
        y = torch.tensor([0.4, -1.0], dtype=D)
        a = gaussian_nll_diag(g(y, [0.5, 0.5]), y)
        b = gaussian_nll_diag(g(y, [2.0, 2.0]), y)
        assert (b - a).item() == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_nonpositive_variance(self):
        with pytest.raises(DomainError):
            gaussian_nll_diag(g([0.0], [0.0]), torch.zeros(1, dtype=D))


class TestCategorical:
    def test_uniform_four(self):
        assert categorical_nll(torch.full((4,), 0.25, dtype=D), 2).item() == pytest.approx(1.386294, abs=1e-6)

    def test_certain(self):
        assert categorical_nll(torch.tensor([0.0, 1.0, 0.0], dtype=D), 1).item() == 0.0

    def test_matches_log_softmax(self):
        logits = torch.randn(6, 5, generator=torch.Generator().manual_seed(1), dtype=D)
        y = torch.tensor([0, 4, 2, 2, 1, 3])
        from_probs = categorical_nll(torch.softmax(logits, -1), y)
        L = logits.numpy()
        oracle = -sum(math.log(math.exp(L[i, y[i]]) / np.exp(L[i]).sum()) for i in range(6))
        assert from_probs.item() == pytest.approx(oracle, abs=1e-12)
        assert categorical_nll_from_logits(logits, y).sum().item() == pytest.approx(oracle, abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            categorical_nll(torch.full((4,), 0.25), 4)

    def test_not_simplex(self):
        with pytest.raises(DomainError):
            categorical_nll(torch.full((4,), 0.3), 0)


class TestReparam:
    def test_zero_noise_is_mean(self):
        d = g([1.5, -2.0], [0.7, 3.0])
        assert torch.equal(reparam_sample(d, torch.zeros(2, dtype=D)), d.mean)

    def test_monte_carlo_mean(self):
        d = g([0.3], [2.0])
        noise = torch.randn(100_000, 1, generator=torch.Generator().manual_seed(5), dtype=D)
        x = reparam_sample(DiagGaussian(d.mean.expand(100_000, 1), d.var.expand(100_000, 1)), noise)
        se = math.sqrt(2.0 / 100_000)
        assert abs(x.mean().item() - 0.3) < 4 * se

    def test_gradient_wrt_mean_is_one(self):
        mean = torch.tensor([0.2, 0.4], dtype=D, requires_grad=True)
        var = torch.tensor([1.0, 2.0], dtype=D, requires_grad=True)
        s = reparam_sample(DiagGaussian(mean, var), torch.tensor([0.5, -1.0], dtype=D))
        gm, gv = torch.autograd.grad(s.sum(), [mean, var])
        assert torch.equal(gm, torch.ones(2, dtype=D))
        assert torch.allclose(gv, torch.tensor([0.5 / 2, -1.0 / (2 * math.sqrt(2))], dtype=D))

    def test_deterministic(self):
        d = g([0.1, 0.2], [0.3, 0.4])
        e = torch.tensor([0.9, -0.9], dtype=D)
        assert torch.equal(reparam_sample(d, e), reparam_sample(d, e))

    def test_errors(self):
        with pytest.raises(DimensionError):
            reparam_sample(g([0.0], [1.0]), torch.zeros(2, dtype=D))
        with pytest.raises(DomainError):
            reparam_sample(g([0.0], [0.0]), torch.zeros(1, dtype=D))


def test_bounded_std_floor():
    raw = torch.linspace(-50, 50, 101, dtype=D)
    s = bounded_std(raw)
    assert bool((s >= 0.1).all())
    assert bounded_std(torch.tensor(0.0, dtype=D)).item() == pytest.approx(0.1 + 0.9 * math.log(2.0))
