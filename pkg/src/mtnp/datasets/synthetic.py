"""Correlated 1D curve families built from four activation functions.

Each family draws shared parameters ``(a, b, c, w)`` and then per-task
copies; task ``t`` realizes ``y = a_t * act_t(w_t * x + b_t) + c_t``.
"""

import hashlib
import json
from dataclasses import dataclass
from typing import Dict

import numpy as np

from mtnp.datasets.batch import FunctionSplit
from mtnp.errors import ConfigError, TaskError

TASKS = ("sine", "tanh", "sigmoid", "gaussian")
MODES = ("partial", "total", "independent")
PARAM_NAMES = ("a", "b", "c", "w")

# priors on the shared parameters; (low, high) of a uniform draw
PRIORS = {"a": (0.5, 2.0), "b": (-2.0, 2.0), "c": (-2.0, 2.0), "w": (0.5, 2.0)}

SPLIT_SIZES = {"train": 800, "valid": 100, "test": 100}
N_TRAIN_POINTS = 200
N_TEST_POINTS = 1000
X_RANGE = (-5.0, 5.0)


def _sigmoid(u):
    return 1.0 / (1.0 + np.exp(-u))


ACTIVATIONS = {
    "sine": np.sin,
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "gaussian": lambda u: np.exp(-u * u),
}


@dataclass
class CurveFamily:
    """Shared parameters plus their per-task realizations (arrays over TASKS)."""

    a: float
    b: float
    c: float
    w: float
    task_params: Dict[str, np.ndarray]
    mode: str

    def params_for(self, task: str):
        i = _task_index(task)
        return tuple(float(self.task_params[k][i]) for k in PARAM_NAMES)

    @property
    def scale(self) -> np.ndarray:
        """Amplitude used to normalize the MSE of each task.

        The shared ``a`` in correlated modes; in independent mode there is no
        shared amplitude, so each task uses its own.
        """
        if self.mode == "independent":
            return np.asarray(self.task_params["a"], dtype=float)
        return np.full(len(TASKS), self.a)


def _task_index(task) -> int:
    if isinstance(task, (int, np.integer)):
        if 0 <= task < len(TASKS):
            return int(task)
    elif task in TASKS:
        return TASKS.index(task)
    raise TaskError(f"unknown task {task!r}; expected one of {TASKS}")


def _draw_shared(rng):
    return {k: rng.uniform(*PRIORS[k]) for k in PARAM_NAMES}


def sample_family_params(rng: np.random.Generator, correlation_mode: str = "partial",
                         noise_var: float = 0.1, noise_is_std: bool = False) -> CurveFamily:
    """Draw one curve family.

    ``noise_var`` is the variance of the per-task perturbation (or its
    standard deviation when ``noise_is_std``).
    """
    if correlation_mode not in MODES:
        raise ConfigError(f"unknown correlation mode {correlation_mode!r}")
    if noise_var < 0:
        raise ConfigError("noise_var must be nonnegative")
    shared = _draw_shared(rng)
    n = len(TASKS)
    if correlation_mode == "independent":
        draws = [_draw_shared(rng) for _ in range(n)]
        task_params = {k: np.array([d[k] for d in draws]) for k in PARAM_NAMES}
    else:
        std = noise_var if noise_is_std else np.sqrt(noise_var)
        # draw the perturbation in both correlated modes so the random stream
        # (and hence the shared parameters of later families) does not depend on the mode
        eps = rng.standard_normal((len(PARAM_NAMES), n)) * std
        if correlation_mode == "total":
            eps = np.zeros_like(eps)
        task_params = {k: shared[k] + eps[i] for i, k in enumerate(PARAM_NAMES)}
    return CurveFamily(task_params=task_params, mode=correlation_mode, **shared)


def eval_curve(family: CurveFamily, task, x):
    a, b, c, w = family.params_for(task)
    act = ACTIVATIONS[TASKS[_task_index(task)]]
    return a * act(w * np.asarray(x, dtype=float) + b) + c


def eval_all_tasks(family: CurveFamily, x) -> np.ndarray:
    """Outputs for all tasks, shape ``(len(x), T)``."""
    return np.stack([eval_curve(family, t, x) for t in TASKS], axis=-1)


def family_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per family so generation can be split or parallelized."""
    return np.random.default_rng([seed, index])


def uniform_grid(n: int = N_TEST_POINTS) -> np.ndarray:
    return np.linspace(X_RANGE[0], X_RANGE[1], n)


@dataclass
class SyntheticDataset:
    seed: int
    mode: str
    noise_var: float
    splits: Dict[str, FunctionSplit]
    families: Dict[str, list]

    def manifest(self) -> dict:
        return {
            "kind": "synthetic",
            "seed": self.seed,
            "mode": self.mode,
            "noise_var": self.noise_var,
            "splits": {k: len(v) for k, v in self.splits.items()},
            "checksum": self.checksum(),
        }

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.splits):
            s = self.splits[name]
            for arr in (s.x, s.y, s.scale):
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def build_synthetic_dataset(seed: int, n_families: int = 1000, mode: str = "partial", noise_var: float = 0.1,
                            noise_is_std: bool = False, n_train_points: int = N_TRAIN_POINTS,
                            n_test_points: int = N_TEST_POINTS) -> SyntheticDataset:
    """Generate train/valid/test splits of curve families.

    Families are indexed globally and each has its own seeded stream, so
    the splits never share a parameter set. Train and valid functions are
    sampled at ``n_train_points`` uniform inputs in [-5, 5]; test functions
    on a uniform grid of ``n_test_points`` including both endpoints.
    """
    total = sum(SPLIT_SIZES.values())
    sizes = {k: round(v * n_families / total) for k, v in SPLIT_SIZES.items()}
    sizes["train"] = n_families - sizes["valid"] - sizes["test"]
    splits, families = {}, {}
    start = 0
    grid = uniform_grid(n_test_points)
    for name in ("train", "valid", "test"):
        fams, xs, ys = [], [], []
        for idx in range(start, start + sizes[name]):
            rng = family_rng(seed, idx)
            fam = sample_family_params(rng, mode, noise_var, noise_is_std)
            if name == "test":
                x = grid
            else:
                x = rng.uniform(X_RANGE[0], X_RANGE[1], n_train_points)
            fams.append(fam)
            xs.append(x)
            ys.append(eval_all_tasks(fam, x))
        start += sizes[name]
        n_pts = n_test_points if name == "test" else n_train_points
        splits[name] = FunctionSplit(
            x=np.asarray(xs).reshape(len(fams), n_pts),
            y=np.asarray(ys).reshape(len(fams), n_pts, len(TASKS)),
            scale=np.asarray([f.scale for f in fams]).reshape(len(fams), len(TASKS)),
            task_names=TASKS,
        )
        families[name] = fams
    return SyntheticDataset(seed, mode, noise_var, splits, families)


def write_manifest(dataset: SyntheticDataset, path) -> dict:
    manifest = dataset.manifest()
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
