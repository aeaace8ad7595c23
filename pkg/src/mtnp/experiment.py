"""Flat experiment configuration and the data/model assembly behind the CLI.

Defaults reproduce the full-scale synthetic setup. Values are resolved in
layers: defaults, dataset preset (weather), desk-scale preset, config file,
then command-line ``key=value`` overrides.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from mtnp.datasets.batch import FunctionSplit
from mtnp.datasets.synthetic import MODES, build_synthetic_dataset
from mtnp.datasets.weather import generate_surrogate_weather, load_weather_table, standardize_and_split
from mtnp.errors import ConfigError
from mtnp.models.network import NeuralProcessModel, build_model
from mtnp.models.variant import ModelDims, continuous_tasks, variant_from_name
from mtnp.training import TrainConfig

OUTPUT_ROOT_ENV = "MTNP_OUTPUT_ROOT"
SURROGATE = "surrogate"


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"
    data_seed: int = 0
    correlation: str = "partial"
    noise_var: float = 0.1
    noise_is_std: bool = False
    n_families: int = 1000
    weather_csv: Optional[str] = None
    # model
    variant: str = "mtnp"
    width: int = 128
    heads: int = 4
    model_seed: int = 0
    # training
    n_iters: int = 300_000
    base_lr: float = 0.00025
    batch_size: int = 24
    lr_warmup: int = 1000
    lr_reading: str = "step"
    beta_warmup: int = 10_000
    train_gamma: float = 0.5
    context_range: Tuple[int, int] = (5, 50)
    n_target: Optional[int] = None
    n_train_families: Optional[int] = None
    seed: int = 0
    grad_clip: Optional[float] = 10.0
    per_label: bool = True
    log_every: int = 100
    checkpoint_every: Optional[int] = None
    prefetch: int = 0
    # evaluation
    eval_m: List[int] = field(default_factory=lambda: [5, 10, 20])
    eval_gammas: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    eval_seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    eval_split: str = "test"
    n_z: int = 5
    n_v: int = 5
    pred_mode: str = "mean"
    transfer_pool: Optional[int] = None
    transfer_seed: int = 0
    check_trials: int = 20
    plot_functions: int = 3
    plot_m: int = 10
    plot_gamma: float = 0.5
    # artifacts
    run_id: Optional[str] = None
    checkpoint: Optional[str] = None
    imputer_checkpoint: Optional[str] = None
    resume: Optional[str] = None
    out_dir: Optional[str] = None

    def __post_init__(self):
        self.context_range = tuple(self.context_range)
        if self.dataset not in ("synthetic", "weather"):
            raise ConfigError(f"dataset must be 'synthetic' or 'weather', got {self.dataset!r}")
        if self.correlation not in MODES:
            raise ConfigError(f"correlation must be one of {MODES}")
        if self.variant != "s_jtnp":
            variant_from_name(self.variant)

    # ------------------------------------------------------------ derived

    @property
    def run_name(self) -> str:
        if self.run_id:
            return self.run_id
        data = self.dataset if self.dataset == "weather" else f"{self.dataset}-{self.correlation}"
        return f"{self.variant}_{data}_s{self.seed}"

    def output_root(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))

    def run_dir(self) -> Path:
        return self.output_root() / self.run_name

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig.from_dict({k: v for k, v in asdict(self).items() if k in names})

    def dims(self) -> ModelDims:
        return ModelDims(width=self.width, heads=self.heads)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_range"] = list(self.context_range)
        return d


PRESET_LAYERS = {
    "weather": {"width": 64, "n_iters": 50_000, "batch_size": 16, "context_range": [5, 20]},
    "desk": {"width": 32, "n_iters": 20_000, "batch_size": 16, "context_range": [5, 20], "n_target": 64,
             "n_train_families": 200, "log_every": 50, "eval_m": [10], "eval_gammas": [0.5]},
}


def _check_keys(d: dict, origin: str):
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} in {origin}")


def parse_override(item: str) -> Tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(file_values: Optional[dict] = None, overrides: Optional[Dict[str, object]] = None,
                   desk_scale: bool = False) -> ExperimentConfig:
    """Merge defaults, presets, file values and overrides (later layers win)."""
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    _check_keys(file_values, "config file")
    _check_keys(overrides, "command line")
    dataset = overrides.get("dataset", file_values.get("dataset", "synthetic"))
    merged: dict = {}
    if dataset == "weather":
        merged.update(PRESET_LAYERS["weather"])
    if desk_scale:
        merged.update(PRESET_LAYERS["desk"])
        if dataset == "weather":
            merged["context_range"] = [5, 20]
    merged.update(file_values)
    merged.update(overrides)
    return ExperimentConfig(**merged)


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            values = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return values


# ---------------------------------------------------------------- data

@dataclass
class LoadedData:
    splits: Dict[str, FunctionSplit]
    manifest: dict


def load_data(cfg: ExperimentConfig) -> LoadedData:
    if cfg.dataset == "synthetic":
        ds = build_synthetic_dataset(cfg.data_seed, cfg.n_families, cfg.correlation, cfg.noise_var, cfg.noise_is_std)
        return LoadedData(ds.splits, ds.manifest())
    if cfg.weather_csv is None:
        raise ConfigError("the weather dataset needs weather_csv (a CSV path or 'surrogate')")
    if cfg.weather_csv == SURROGATE:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "surrogate.csv"
            generate_surrogate_weather(cfg.data_seed).to_csv(path, index=False)
            series = load_weather_table(path)
    else:
        series = load_weather_table(cfg.weather_csv)
    splits, scaler = standardize_and_split(series, np.random.default_rng(cfg.data_seed))
    h = hashlib.sha256()
    for name in sorted(splits):
        h.update(np.ascontiguousarray(splits[name].y, dtype="<f8").tobytes())
    manifest = {"kind": "weather", "seed": cfg.data_seed, "source": cfg.weather_csv,
                "splits": {k: len(v) for k, v in splits.items()}, "checksum": h.hexdigest(),
                "mean": scaler.mean.tolist(), "std": scaler.std.tolist()}
    return LoadedData(splits, manifest)


def build_experiment_model(cfg: ExperimentConfig, task_names, variant_name: Optional[str] = None
                           ) -> NeuralProcessModel:
    return build_model(variant_from_name(variant_name or cfg.variant), cfg.dims(), continuous_tasks(task_names),
                       seed=cfg.model_seed)


def expected_fingerprint(cfg: ExperimentConfig, task_names, variant_name: Optional[str] = None) -> str:
    return variant_from_name(variant_name or cfg.variant).fingerprint(cfg.dims(), continuous_tasks(task_names))
