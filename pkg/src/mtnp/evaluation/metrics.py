"""Error metrics, evaluation over a function split, and CSV reports."""

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from mtnp.datasets.batch import FunctionSplit
from mtnp.datasets.sampling import context_from_target, target_batch
from mtnp.datasets.synthetic import CurveFamily
from mtnp.diffcore import gaussian_log_prob, DiagGaussian
from mtnp.errors import DomainError
from mtnp.evaluation.predictive import mc_predictive
from mtnp.models.network import NeuralProcessModel, PredictiveParams

METRIC_COLUMNS = ("dataset", "variant", "task", "m", "gamma", "seed", "mse", "nmse", "nll")


def _observed(mask: Optional[Tensor], like: Tensor) -> Tensor:
    return torch.ones_like(like, dtype=torch.bool) if mask is None else mask


def mse(pred: Tensor, truth: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """Per-task mean squared error over all observed ``(item, point)`` pairs; inputs ``(B, N, T)``."""
    mask = _observed(mask, truth)
    err = torch.where(mask, (pred - truth) ** 2, torch.zeros((), dtype=pred.dtype))
    return err.sum(dim=(0, 1)) / mask.sum(dim=(0, 1))


def _scale_tensor(scale, truth: Tensor) -> Tensor:
    if isinstance(scale, CurveFamily):
        scale = scale.scale
    s = torch.as_tensor(np.asarray(scale, dtype=np.float64), dtype=truth.dtype)
    if s.dim() == 0:
        s = s.expand(truth.shape[-1])
    if s.dim() == 1:
        s = s.expand(truth.shape[0], truth.shape[-1])
    if bool((s == 0).any()):
        raise DomainError("normalizing amplitude must be nonzero")
    return s


def normalized_mse(pred: Tensor, truth: Tensor, scale, mask: Optional[Tensor] = None) -> Tensor:
    """Per-task squared error divided by the squared amplitude of each item's curve family.

    ``scale`` is a ``CurveFamily``, a per-task vector ``(T,)`` or per-item
    amplitudes ``(B, T)``. With a single family this equals ``mse / a**2``.
    """
    mask = _observed(mask, truth)
    s = _scale_tensor(scale, truth)
    if bool((s == s[:1]).all()):
        # a shared amplitude factors out of the mean exactly
        return mse(pred, truth, mask) / s[0] ** 2
    err = torch.where(mask, (pred - truth) ** 2, torch.zeros((), dtype=pred.dtype)) / (s ** 2).unsqueeze(1)
    return err.sum(dim=(0, 1)) / mask.sum(dim=(0, 1))


def nll_metric(params: PredictiveParams, truth: Tensor, mask: Optional[Tensor] = None,
               reduce: str = "mixture") -> Tensor:
    """Per-task negative log-likelihood of the targets, averaged over observed points.

    ``mixture`` scores the equally weighted mixture of the ``K`` samples,
    ``-log(mean_k p_k(y))``; ``sample_mean`` averages the per-sample NLLs.
    """
    mask = _observed(mask, truth)
    y = torch.where(mask, truth, torch.zeros((), dtype=truth.dtype))
    K = params.n_samples
    logp = torch.empty_like(params.mean)
    for t, spec in enumerate(params.tasks):
        if spec.kind == "continuous":
            dist = DiagGaussian(params.mean[..., t], params.var[..., t])
            logp[..., t] = gaussian_log_prob(dist, y[..., t].expand_as(dist.mean))
        else:
            lg = torch.log_softmax(params.logits[..., t, :spec.n_classes], dim=-1)
            cls = y[..., t].long().expand(lg.shape[:-1]).unsqueeze(-1)
            logp[..., t] = torch.gather(lg, -1, cls).squeeze(-1)
    if reduce == "mixture":
        per_point = -(torch.logsumexp(logp, dim=0) - math.log(K))
    elif reduce == "sample_mean":
        per_point = -logp.mean(dim=0)
    else:
        raise DomainError(f"unknown reduction {reduce!r}")
    per_point = torch.where(mask, per_point, torch.zeros((), dtype=per_point.dtype))
    return per_point.sum(dim=(0, 1)) / mask.sum(dim=(0, 1))


def context_rng(seed: int, m: int, gamma: float) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(m), int(round(gamma * 10000))])


@torch.no_grad()
def evaluate_split(model: NeuralProcessModel, split: FunctionSplit, m: int, gamma: float, seed: int,
                   n_z: int = 5, n_v: int = 5, mode: str = "mean", chunk: int = 10,
                   predictor=None) -> Dict[str, Dict[str, float]]:
    """Metrics per task for contexts of size ``m`` drawn from each function's points.

    Targets are all points of each function. ``predictor(batch, generator)``
    replaces ``mc_predictive`` (used for composed baselines).
    """
    rng = context_rng(seed, m, gamma)
    gen = torch.Generator().manual_seed(int(seed))
    dtype = next(model.parameters()).dtype if model is not None else torch.float32
    T = split.n_tasks
    sums = {k: np.zeros(T) for k in ("se", "nse", "nll", "nll_s")}
    count = np.zeros(T)
    for start in range(0, len(split), chunk):
        fam = np.arange(start, min(start + chunk, len(split)))
        batch = context_from_target(rng, target_batch(split, fam, dtype=dtype), m, gamma)
        if predictor is None:
            pred = mc_predictive(model, batch, gen, n_z, n_v, mode)
        else:
            pred = predictor(batch, gen)
        n = batch.mask_target.sum(dim=(0, 1)).double().numpy()
        y = batch.y_target
        sums["se"] += mse(pred.mean, y, batch.mask_target).double().numpy() * n
        sums["nse"] += normalized_mse(pred.mean, y, batch.scale, batch.mask_target).double().numpy() * n
        sums["nll"] += nll_metric(pred.params, y, batch.mask_target).double().numpy() * n
        sums["nll_s"] += nll_metric(pred.params, y, batch.mask_target, "sample_mean").double().numpy() * n
        count += n
    out = {}
    for t, name in enumerate(split.task_names):
        out[name] = {"mse": sums["se"][t] / count[t], "nmse": sums["nse"][t] / count[t],
                     "nll": sums["nll"][t] / count[t], "nll_sample_mean": sums["nll_s"][t] / count[t]}
    return out


@dataclass
class MetricsReport:
    """Metric rows tagged by (dataset, variant, m, gamma, seed) with seed aggregation."""

    rows: List[dict] = field(default_factory=list)

    def add(self, dataset: str, variant: str, m: int, gamma: float, seed: int,
            per_task: Dict[str, Dict[str, float]]):
        for task, vals in per_task.items():
            self.rows.append({"dataset": dataset, "variant": variant, "task": task, "m": int(m),
                              "gamma": float(gamma), "seed": int(seed), **{k: float(v) for k, v in vals.items()}})

    def sorted_rows(self) -> List[dict]:
        key = lambda r: (r["dataset"], r["variant"], r["m"], r["gamma"], r["seed"], r["task"])
        return sorted(self.rows, key=key)

    def write_csv(self, path):
        write_metrics_csv(path, self.sorted_rows())

    def aggregate(self, metric: str = "nmse") -> List[dict]:
        """Mean and (sample) std over seeds per (dataset, variant, task, m, gamma)."""
        groups: Dict[tuple, List[float]] = {}
        for r in self.rows:
            k = (r["dataset"], r["variant"], r["task"], r["m"], r["gamma"])
            groups.setdefault(k, []).append(r[metric])
        out = []
        for k in sorted(groups):
            vals = np.asarray(groups[k])
            row = dict(zip(("dataset", "variant", "task", "m", "gamma"), k))
            row.update({"metric": metric, "mean": float(vals.mean()), "n_seeds": len(vals),
                        "std": float(vals.std(ddof=1)) if len(vals) > 1 else None})
            out.append(row)
        return out

    def mean_over_seeds(self, metric: str = "nmse", **filters) -> Dict[str, float]:
        """Per-task seed-mean of ``metric`` among rows matching ``filters``."""
        acc: Dict[str, List[float]] = {}
        for r in self.rows:
            if all(r[k] == v for k, v in filters.items()):
                acc.setdefault(r["task"], []).append(r[metric])
        return {t: float(np.mean(v)) for t, v in acc.items()}


def write_metrics_csv(path, rows: Iterable[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["dataset"], r["variant"], r["task"], r["m"], repr(r["gamma"]), r["seed"],
                        repr(r["mse"]), repr(r["nmse"]), repr(r["nll"])])


def read_metrics_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    conv = {"m": int, "seed": int, "gamma": float, "mse": float, "nmse": float, "nll": float}
    return [{k: conv.get(k, str)(v) for k, v in r.items()} for r in rows]


def format_aggregate(rows: Sequence[dict]) -> str:
    lines = []
    for r in rows:
        spread = "" if r["std"] is None else f" ± {r['std']:.4f}"
        lines.append(f"{r['dataset']:9s} {r['variant']:10s} {r['task']:9s} m={r['m']:<3d} "
                     f"gamma={r['gamma']:.2f} {r['metric']}={r['mean']:.4f}{spread} (n={r['n_seeds']})")
    return "\n".join(lines)
