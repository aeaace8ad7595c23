"""Transfer analysis: how much do labels of other tasks help a target task.

Each test function starts from a base context of one completely labeled
point. Adding a pool of points labeled only for a set of source tasks
changes the target-task error; the relative reduction is the gain.
"""

import csv
import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from mtnp.datasets.batch import FunctionSplit, MultiTaskBatch
from mtnp.datasets.sampling import target_batch
from mtnp.errors import ProtocolError, SizeError, TaskError
from mtnp.evaluation.predictive import mc_predictive
from mtnp.models.network import NeuralProcessModel

TRANSFER_COLUMNS = ("target", "source_set", "gain_pct")


def source_sets(tasks: Sequence[str], target: str) -> List[Tuple[str, ...]]:
    """All nonempty subsets of the tasks other than ``target`` (2**(T-1) - 1 of them)."""
    others = [t for t in tasks if t != target]
    return [c for k in range(1, len(others) + 1) for c in itertools.combinations(others, k)]


@dataclass
class _Protocol:
    base_idx: np.ndarray      # (B,)
    pool_idx: np.ndarray      # (B, P)


def _draw_protocol(rng: np.random.Generator, n_items: int, n_points: int, n_pool: int) -> _Protocol:
    if n_pool + 1 > n_points:
        raise SizeError(f"source pool of {n_pool} points does not fit in {n_points} points")
    base, pool = [], []
    for _ in range(n_items):
        idx = rng.choice(n_points, n_pool + 1, replace=False)
        base.append(idx[0])
        pool.append(idx[1:])
    return _Protocol(np.asarray(base), np.asarray(pool))


def _context_batch(target: MultiTaskBatch, proto: _Protocol, source_cols: Sequence[int]) -> MultiTaskBatch:
    B, _, T = target.y_target.shape
    idx = np.concatenate([proto.base_idx[:, None], proto.pool_idx], axis=1)
    idx_t = torch.as_tensor(idx, dtype=torch.long)
    mask = torch.zeros(B, idx.shape[1], T, dtype=torch.bool)
    mask[:, 0, :] = True
    for c in source_cols:
        mask[:, 1:, c] = True
    gather = lambda t: torch.gather(t, 1, idx_t[..., None].expand(-1, -1, t.shape[-1]))
    y = gather(target.y_target).masked_fill(~mask, float("nan"))
    return MultiTaskBatch(gather(target.x_target), y, mask, target.x_target, target.y_target,
                          target.mask_target, target.scale)


def _errors(model, batch: MultiTaskBatch, seed: int, normalize: bool) -> np.ndarray:
    """Summed per-task squared error (optionally divided by amplitude squared) and point counts."""
    gen = torch.Generator().manual_seed(int(seed))
    pred = mc_predictive(model, batch, gen).mean
    err = (pred - batch.y_target) ** 2
    if normalize and batch.scale is not None:
        err = err / (batch.scale ** 2).unsqueeze(1)
    return err.sum(dim=(0, 1)).double().numpy()


@torch.no_grad()
def transfer_table(model: NeuralProcessModel, split: FunctionSplit, seed: int = 0, n_pool: int = 29,
                   chunk: int = 10, normalize: bool = True) -> List[dict]:
    """Gains in percent for every (target, source set) pair over all functions of ``split``."""
    tasks = list(split.task_names)
    all_sets = [c for k in range(1, len(tasks)) for c in itertools.combinations(tasks, k)]
    rng = np.random.default_rng([int(seed), 7919])
    dtype = next(model.parameters()).dtype
    before = np.zeros(len(tasks))
    after = {s: np.zeros(len(tasks)) for s in all_sets}
    for start in range(0, len(split), chunk):
        fam = np.arange(start, min(start + chunk, len(split)))
        tgt = target_batch(split, fam, dtype=dtype)
        proto = _draw_protocol(rng, len(fam), tgt.x_target.shape[1], n_pool)
        noise = int(rng.integers(0, 2 ** 62))
        before += _errors(model, _context_batch(tgt, proto, []), noise, normalize)
        for s in all_sets:
            cols = [tasks.index(t) for t in s]
            after[s] += _errors(model, _context_batch(tgt, proto, cols), noise, normalize)
    rows = []
    for ti, target in enumerate(tasks):
        for s in source_sets(tasks, target):
            gain = (before[ti] - after[s][ti]) / before[ti] * 100.0
            rows.append({"target": target, "source_set": "+".join(s), "gain_pct": float(gain)})
    return rows


def transfer_gain(model: NeuralProcessModel, split: FunctionSplit, target_task: str,
                  source_tasks: Sequence[str], seed: int = 0, n_pool: int = 29, chunk: int = 10,
                  normalize: bool = True) -> float:
    """Relative error reduction (percent) on ``target_task`` from labeling ``source_tasks``.

    Raises:
        ProtocolError: the target is among the sources.
        TaskError: an unknown task name.
    """
    tasks = list(split.task_names)
    for t in [target_task, *source_tasks]:
        if t not in tasks:
            raise TaskError(f"unknown task {t!r}")
    if target_task in source_tasks:
        raise ProtocolError("the target task cannot be one of its own sources")
    if not source_tasks:
        raise ProtocolError("at least one source task is required")
    rng = np.random.default_rng([int(seed), 7919])
    dtype = next(model.parameters()).dtype
    ti = tasks.index(target_task)
    cols = [tasks.index(t) for t in source_tasks]
    before = after = 0.0
    with torch.no_grad():
        for start in range(0, len(split), chunk):
            fam = np.arange(start, min(start + chunk, len(split)))
            tgt = target_batch(split, fam, dtype=dtype)
            proto = _draw_protocol(rng, len(fam), tgt.x_target.shape[1], n_pool)
            noise = int(rng.integers(0, 2 ** 62))
            before += _errors(model, _context_batch(tgt, proto, []), noise, normalize)[ti]
            after += _errors(model, _context_batch(tgt, proto, cols), noise, normalize)[ti]
    return float((before - after) / before * 100.0)


def pair_gains(rows: Sequence[dict]) -> Dict[Tuple[str, str], float]:
    """``(source, target) -> mean gain`` over every source set containing ``source``."""
    acc: Dict[Tuple[str, str], List[float]] = {}
    for r in rows:
        for s in r["source_set"].split("+"):
            acc.setdefault((s, r["target"]), []).append(r["gain_pct"])
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def write_transfer_csv(path, rows: Sequence[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSFER_COLUMNS)
        for r in rows:
            w.writerow([r["target"], r["source_set"], repr(r["gain_pct"])])
