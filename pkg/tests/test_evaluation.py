import functools
import math

import numpy as np
import pytest
import torch

from mtnp.datasets.sampling import context_from_target, target_batch
from mtnp.datasets.synthetic import build_synthetic_dataset, sample_family_params
from mtnp.diffcore import DiagGaussian
from mtnp.diffcore.distributions import gaussian_nll_diag
from mtnp.errors import ConfigError, DomainError, ProtocolError, SizeError, TaskError
from mtnp.evaluation.checks import (
    check_consistency, check_exchangeability, order_dependent_mock, target_coupling_mock,
)
from mtnp.evaluation.imputation import ImputedJointPredictor, impute_context
from mtnp.evaluation.metrics import (
    METRIC_COLUMNS, MetricsReport, context_rng, evaluate_split, mse, nll_metric, normalized_mse,
    read_metrics_csv,
)
from mtnp.evaluation.predictive import mc_predictive
from mtnp.evaluation.transfer import (
    TRANSFER_COLUMNS, pair_gains, source_sets, transfer_gain, transfer_table, write_transfer_csv,
)
from mtnp.models.network import PredictiveParams, build_model
from mtnp.models.variant import ModelDims, continuous_tasks, variant_from_name

D = torch.float64
DIMS = ModelDims(width=16, heads=2)
TASK_NAMES = ["sine", "tanh", "sigmoid", "gaussian"]


@pytest.fixture(scope="module")
def ds():
    return build_synthetic_dataset(0, n_families=40, n_test_points=60)


@pytest.fixture(scope="module")
def test_split(ds):
    return ds.splits["test"]


def model(name="mtnp", seed=0, dtype=D):
    return build_model(variant_from_name(name), DIMS, continuous_tasks(TASK_NAMES), seed=seed, dtype=dtype)


def eval_batch(split, m=5, gamma=0.5, seed=0):
    return context_from_target(np.random.default_rng(seed), target_batch(split, [0, 1, 2], dtype=D), m, gamma)


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def collapsed(m):
    """The same model with its latent sampling noise switched off."""
    m.predict = functools.partial(type(m).predict, m, noise_scale=0.0)
    return m


class TestPredictive:
    def test_default_sample_count(self, test_split):
        p = mc_predictive(model(), eval_batch(test_split), gen())
        assert p.n_samples == 25 and p.mean.shape == p.params.mean.shape[1:]

    def test_mean_mode_averages_samples(self, test_split):
        p = mc_predictive(model(), eval_batch(test_split), gen())
        assert torch.allclose(p.mean, p.params.mean.mean(0), atol=0, rtol=0)

    def test_map_single_pass(self, test_split):
        p = mc_predictive(model(), eval_batch(test_split), mode="map")
        assert p.n_samples == 1

    @pytest.mark.parametrize("name", ["mtnp", "stnp", "mtnp_g"])
    def test_collapsed_modes_coincide(self, test_split, name):
        m = collapsed(model(name))
        b = eval_batch(test_split, gamma=0.0 if name == "jtnp" else 0.5)
        means = [mc_predictive(m, b, gen(), mode=mode).mean for mode in ("mean", "map", "best")]
        for other in means[1:]:
            assert float((other - means[0]).abs().max()) < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_best_not_worse_than_mean(self, test_split, seed):
        m, b = model(seed=seed), eval_batch(test_split, seed=seed)
        best = mc_predictive(m, b, gen(seed), mode="best")
        mean = mc_predictive(m, b, gen(seed), mode="mean")
        e_best = mse(best.mean, b.y_target, b.mask_target)
        e_mean = mse(mean.mean, b.y_target, b.mask_target)
        assert torch.all(e_best <= e_mean + 1e-12)

    def test_best_picks_per_task_minimum(self, test_split):
        m, b = model(), eval_batch(test_split)
        best = mc_predictive(m, b, gen(), mode="best")
        per_sample = ((best.params.mean - b.y_target) ** 2).sum(dim=2)       # (K, B, T)
        assert torch.equal(best.chosen, per_sample.argmin(0))

    def test_unknown_mode(self, test_split):
        with pytest.raises(ConfigError):
            mc_predictive(model(), eval_batch(test_split), mode="median")


class TestMetrics:
    def test_mse_values(self):
        truth = torch.zeros(2, 3, 2, dtype=D)
        pred = torch.ones_like(truth)
        pred[..., 1] = 3.0
        assert mse(pred, truth).tolist() == [1.0, 9.0]
        assert mse(truth, truth).tolist() == [0.0, 0.0]

    def test_mse_masks_unobserved(self):
        truth = torch.zeros(1, 2, 1, dtype=D)
        pred = torch.tensor([[[1.0], [5.0]]], dtype=D)
        mask = torch.tensor([[[True], [False]]])
        assert mse(pred, truth, mask).item() == 1.0

    def test_normalized_mse_amplitude_two(self):
        truth = torch.zeros(3, 7, 4, dtype=D)
        assert normalized_mse(truth + 1, truth, 2.0).tolist() == [0.25] * 4

    def test_normalized_is_mse_over_a_squared(self):
        g = torch.Generator().manual_seed(0)
        pred, truth = torch.randn(2, 9, 4, generator=g, dtype=D), torch.randn(2, 9, 4, generator=g, dtype=D)
        assert torch.equal(normalized_mse(pred, truth, 1.7), mse(pred, truth) / 1.7 ** 2)

    def test_normalized_with_family(self):
        fam = sample_family_params(np.random.default_rng(3), "partial")
        truth = torch.zeros(1, 4, 4, dtype=D)
        out = normalized_mse(truth + 0.5, truth, fam)
        assert torch.allclose(out, torch.full((4,), 0.25 / fam.a ** 2, dtype=D))

    def test_per_item_scale(self):
        truth = torch.zeros(2, 3, 1, dtype=D)
        out = normalized_mse(truth + 1, truth, np.array([[1.0], [2.0]]))
        assert out.item() == pytest.approx((1.0 + 0.25) / 2)

    def test_zero_amplitude(self):
        truth = torch.zeros(1, 2, 1, dtype=D)
        with pytest.raises(DomainError):
            normalized_mse(truth, truth, 0.0)

    def test_point_order_invariance(self):
        g = torch.Generator().manual_seed(1)
        pred, truth = torch.randn(2, 11, 4, generator=g, dtype=D), torch.randn(2, 11, 4, generator=g, dtype=D)
        perm = torch.randperm(11, generator=g)
        assert torch.allclose(mse(pred, truth), mse(pred[:, perm], truth[:, perm]), rtol=1e-14, atol=0)

    def _params(self, K, seed=0):
        g = torch.Generator().manual_seed(seed)
        mean = torch.randn(K, 2, 5, 4, generator=g, dtype=D)
        var = torch.rand(K, 2, 5, 4, generator=g, dtype=D) + 0.05
        return PredictiveParams(mean, var, None, continuous_tasks(TASK_NAMES))

    def test_single_sample_nll_is_gaussian_nll(self):
        p = self._params(1)
        y = torch.randn(2, 5, 4, generator=torch.Generator().manual_seed(9), dtype=D)
        expect = [gaussian_nll_diag(DiagGaussian(p.mean[0, ..., t], p.var[0, ..., t]), y[..., t]) / 10
                  for t in range(4)]
        assert torch.allclose(nll_metric(p, y), torch.stack(expect), atol=1e-12)

    def test_nll_numpy_oracle(self):
        p = self._params(3)
        y = torch.randn(2, 5, 4, generator=torch.Generator().manual_seed(9), dtype=D)
        mu, var, yy = p.mean.numpy(), p.var.numpy(), y.numpy()
        dens = np.exp(-(yy - mu) ** 2 / (2 * var)) / np.sqrt(2 * np.pi * var)
        expect = -np.log(dens.mean(axis=0)).mean(axis=(0, 1))
        assert np.allclose(nll_metric(p, y).numpy(), expect, atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_mixture_bounded_by_sample_mean(self, seed):
        p = self._params(25, seed)
        y = torch.randn(2, 5, 4, generator=torch.Generator().manual_seed(seed + 50), dtype=D)
        assert torch.all(nll_metric(p, y) <= nll_metric(p, y, reduce="sample_mean") + 1e-12)

    def test_unknown_reduction(self):
        p = self._params(2)
        with pytest.raises(DomainError):
            nll_metric(p, p.mean[0], reduce="median")

    def test_context_rng_keys(self):
        a = context_rng(1, 10, 0.5).random()
        assert a == context_rng(1, 10, 0.5).random()
        assert a != context_rng(1, 10, 0.25).random() and a != context_rng(2, 10, 0.5).random()


class TestEvaluateSplit:
    def test_deterministic_and_csv_stable(self, test_split, tmp_path):
        m = model()
        reports = []
        for run in ("a", "b"):
            rep = MetricsReport()
            rep.add("synthetic", "mtnp", 5, 0.5, 0, evaluate_split(m, test_split, 5, 0.5, 0, chunk=2))
            rep.write_csv(tmp_path / f"{run}.csv")
            reports.append(rep)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = read_metrics_csv(tmp_path / "a.csv")
        assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == 4
        assert rows == reports[0].sorted_rows() or all(
            {k: r[k] for k in METRIC_COLUMNS} == {k: s[k] for k in METRIC_COLUMNS}
            for r, s in zip(rows, reports[0].sorted_rows()))

    def test_chunking_does_not_matter_for_map(self, test_split):
        m = model()
        a = evaluate_split(m, test_split, 5, 0.0, 1, mode="map", chunk=1)
        b = evaluate_split(m, test_split, 5, 0.0, 1, mode="map", chunk=4)
        for t in TASK_NAMES:
            assert a[t]["mse"] == pytest.approx(b[t]["mse"], rel=1e-12)

    def test_keys(self, test_split):
        out = evaluate_split(model(), test_split, 3, 0.25, 0)
        assert set(out) == set(TASK_NAMES)
        assert set(out["sine"]) == {"mse", "nmse", "nll", "nll_sample_mean"}
        assert out["sine"]["nll"] <= out["sine"]["nll_sample_mean"] + 1e-12


class TestReport:
    def test_std_only_with_several_seeds(self):
        rep = MetricsReport()
        vals = {t: {"mse": 1.0, "nmse": 1.0, "nll": 0.0} for t in TASK_NAMES}
        rep.add("synthetic", "stnp", 10, 0.5, 0, vals)
        agg = rep.aggregate()
        assert all(r["std"] is None and r["n_seeds"] == 1 for r in agg)
        rep.add("synthetic", "stnp", 10, 0.5, 1, {t: {"mse": 3.0, "nmse": 3.0, "nll": 0.0} for t in TASK_NAMES})
        agg = rep.aggregate()
        assert all(r["n_seeds"] == 2 and r["mean"] == 2.0 for r in agg)
        assert agg[0]["std"] == pytest.approx(math.sqrt(2.0))

    def test_mean_over_seeds_filters(self):
        rep = MetricsReport()
        for v, x in (("mtnp", 1.0), ("stnp", 5.0)):
            rep.add("synthetic", v, 10, 0.5, 0, {"sine": {"mse": x, "nmse": x, "nll": 0.0}})
        assert rep.mean_over_seeds(variant="mtnp") == {"sine": 1.0}


class TestTransfer:
    def test_source_set_counts(self):
        assert len(source_sets(TASK_NAMES, "sine")) == 7
        six = [f"w{i}" for i in range(6)]
        assert len(source_sets(six, "w0")) == 31
        assert all("sine" not in s for s in source_sets(TASK_NAMES, "sine"))

    def test_unchanged_predictions_give_zero_gain(self, test_split):
        # an independent-task model ignores labels of other tasks
        rows = transfer_table(model("stnp"), test_split, seed=0, n_pool=10)
        assert len(rows) == 4 * 7
        assert all(r["gain_pct"] == 0.0 for r in rows)

    def test_single_gain_matches_table(self, test_split):
        m = model()
        rows = transfer_table(m, test_split, seed=2, n_pool=10)
        row = next(r for r in rows if r["target"] == "tanh" and r["source_set"] == "sine+gaussian")
        g = transfer_gain(m, test_split, "tanh", ["sine", "gaussian"], seed=2, n_pool=10)
        assert g == pytest.approx(row["gain_pct"], rel=1e-9)

    def test_errors(self, test_split):
        m = model()
        with pytest.raises(ProtocolError):
            transfer_gain(m, test_split, "sine", ["sine", "tanh"])
        with pytest.raises(ProtocolError):
            transfer_gain(m, test_split, "sine", [])
        with pytest.raises(TaskError):
            transfer_gain(m, test_split, "cosine", ["tanh"])
        with pytest.raises(SizeError):
            transfer_gain(m, test_split, "sine", ["tanh"], n_pool=60)

    def test_pair_gains_average(self, tmp_path):
        rows = [{"target": "t", "source_set": "a", "gain_pct": 10.0},
                {"target": "t", "source_set": "a+b", "gain_pct": 20.0},
                {"target": "t", "source_set": "b", "gain_pct": -4.0}]
        assert pair_gains(rows) == {("a", "t"): 15.0, ("b", "t"): 8.0}
        write_transfer_csv(tmp_path / "t.csv", rows)
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == ",".join(TRANSFER_COLUMNS)


class TestProcessChecks:
    @pytest.mark.parametrize("name", ["mtnp", "stnp", "jtnp", "mtnp_t", "mtnp_l"])
    def test_random_init_passes(self, test_split, name):
        m = model(name, dtype=torch.float32)
        b = eval_batch(test_split, gamma=0.0 if name == "jtnp" else 0.5)
        ex = check_exchangeability(m, b, np.random.default_rng(0))
        co = check_consistency(m, b, np.random.default_rng(0))
        assert ex.passed and co.passed, (ex.line(), co.line())

    def test_identity_permutation_zero(self, test_split):
        m, b = model(), eval_batch(test_split)
        ex = check_exchangeability(m, b, np.random.default_rng(0), trials=0)
        assert ex.max_deviation == 0.0 and ex.passed

    def test_order_dependent_mock_fails(self, test_split):
        rep = check_exchangeability(order_dependent_mock(model()), eval_batch(test_split), np.random.default_rng(0))
        assert not rep.passed and rep.line().startswith("FAIL")

    def test_target_coupling_mock_fails(self, test_split):
        rep = check_consistency(target_coupling_mock(model()), eval_batch(test_split), np.random.default_rng(0))
        assert not rep.passed

    def test_mocks_leave_original_intact(self, test_split):
        m = model()
        order_dependent_mock(m)
        assert type(m).__name__ == "NeuralProcessModel"
        assert check_exchangeability(m, eval_batch(test_split), np.random.default_rng(1)).passed


class TestImputation:
    def test_fills_only_missing_labels(self, test_split):
        b = eval_batch(test_split, m=8, gamma=0.5, seed=4)
        done = impute_context(model("stnp"), b, gen())
        labeled = b.mask_context.any(-1)
        assert torch.equal(done.mask_context, labeled[..., None].expand_as(b.mask_context))
        obs = b.mask_context
        assert torch.equal(done.y_context[obs], b.y_context[obs])
        assert torch.isfinite(done.y_context[done.mask_context]).all()

    def test_pipeline(self, test_split):
        pred = ImputedJointPredictor(model("stnp"), model("jtnp"))(eval_batch(test_split), gen())
        assert pred.n_samples == 5 and torch.isfinite(pred.mean).all()

    def test_wrong_models(self):
        with pytest.raises(ConfigError):
            ImputedJointPredictor(model("stnp"), model("mtnp"))
        with pytest.raises(ConfigError):
            impute_context(model("jtnp"), None)
