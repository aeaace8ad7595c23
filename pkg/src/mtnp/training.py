"""Training loop, configuration presets and checkpoint round-trips.

Every step derives its randomness from ``(seed, step)`` alone, so a run is
reproducible bit for bit and a resumed run continues exactly where an
uninterrupted one would be.
"""

import csv
import queue
import threading
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from mtnp.datasets.batch import FunctionSplit, MultiTaskBatch
from mtnp.datasets.sampling import make_batch
from mtnp.diffcore import Adam, clip_grad_norm
from mtnp.diffcore.checkpoint import load_tensors, save_tensors
from mtnp.errors import ArtifactMismatch, ConfigError, DomainError, TrainingDiverged
from mtnp.models.network import NeuralProcessModel, build_model
from mtnp.models.variant import ModelDims, ModelVariant, TaskSpec
from mtnp.objective import beta_schedule, elbo, lr_schedule

TRACE_COLUMNS = ("step", "loss", "recon", "kl_z", "kl_v_total", "lr", "beta")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. Defaults are the full-scale synthetic setup.

    Attributes:
        context_range: inclusive bounds of the per-batch context size.
        n_target: target points drawn per function each step; ``None`` uses
            every point of the function.
        n_train_families: restrict training to the first this many functions.
        per_label: divide each item's bound by its number of observed labels.
        prefetch: size of the batch queue filled by a background thread
            (0 assembles batches inline). Batch contents do not depend on it.
    """

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

    def __post_init__(self):
        lo, hi = self.context_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid context range {self.context_range}")
        if self.n_target is not None and self.n_target < hi:
            raise ConfigError("n_target must be at least the largest context size")
        if not 0.0 <= self.train_gamma < 1.0:
            raise ConfigError("train_gamma must lie in [0, 1)")
        if self.n_iters < 1 or self.batch_size < 1:
            raise ConfigError("n_iters and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_range"] = list(self.context_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training keys {unknown}")
        d = dict(d)
        if "context_range" in d:
            d["context_range"] = tuple(d["context_range"])
        return cls(**d)


def synthetic_config(**kw) -> TrainConfig:
    return replace(TrainConfig(), **kw)


def weather_config(**kw) -> TrainConfig:
    return replace(TrainConfig(n_iters=50_000, batch_size=16, context_range=(5, 20)), **kw)


def desk_config(**kw) -> TrainConfig:
    """Reduced budget: 20k steps, batch 16, 200 functions, 64 targets and 5 to 20 context points."""
    return replace(TrainConfig(n_iters=20_000, batch_size=16, context_range=(5, 20), n_target=64,
                               n_train_families=200, log_every=50), **kw)


DESK_DIMS = ModelDims(width=32)

TRAIN_PRESETS: Dict[str, Callable[..., TrainConfig]] = {
    "synthetic": synthetic_config,
    "weather": weather_config,
    "desk": desk_config,
}


def effective_gamma(variant: ModelVariant, config: TrainConfig) -> float:
    """JTNP only ever trains on complete data."""
    return 0.0 if variant.requires_complete_context else config.train_gamma


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step)])


def sample_training_batch(split: FunctionSplit, config: TrainConfig, gamma: float,
                          step: int) -> Tuple[MultiTaskBatch, int]:
    """The batch for ``step`` plus the integer seed of its torch noise stream."""
    rng = step_rng(config.seed, step)
    n_fam = len(split) if config.n_train_families is None else min(config.n_train_families, len(split))
    fam = rng.integers(0, n_fam, config.batch_size)
    lo, hi = config.context_range
    m = int(rng.integers(lo, hi + 1))
    batch = make_batch(rng, split, fam, m, gamma, n_target=config.n_target)
    noise_seed = int(rng.integers(0, 2 ** 62))
    return batch, noise_seed


class BatchStream:
    """Yields ``(step, batch, noise_seed)`` in step order.

    With ``prefetch > 0`` a producer thread fills a bounded queue ahead of
    the consumer; order and contents are the same either way.
    """

    def __init__(self, split: FunctionSplit, config: TrainConfig, gamma: float, start: int, stop: int):
        self.split, self.config, self.gamma = split, config, gamma
        self.start, self.stop = start, stop

    def _make(self, step):
        batch, noise_seed = sample_training_batch(self.split, self.config, self.gamma, step)
        return step, batch, noise_seed

    def __iter__(self) -> Iterator:
        if self.config.prefetch <= 0:
            for step in range(self.start, self.stop + 1):
                yield self._make(step)
            return
        q: "queue.Queue" = queue.Queue(maxsize=self.config.prefetch)
        done = object()
        stop_flag = threading.Event()

        def produce():
            try:
                for step in range(self.start, self.stop + 1):
                    if stop_flag.is_set():
                        return
                    q.put(self._make(step))
            except BaseException as exc:  # surfaced in the consumer
                q.put(exc)
            q.put(done)

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        try:
            while True:
                item = q.get()
                if item is done:
                    return
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            stop_flag.set()
            while worker.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    worker.join(timeout=0.01)


# ---------------------------------------------------------------- checkpoints

def checkpoint_path(out_dir, run_id: str, step: int) -> Path:
    return Path(out_dir) / f"{run_id}_{step}.ckpt"


def model_meta(model: NeuralProcessModel) -> dict:
    return {
        "variant": model.variant.to_dict(),
        "dims": asdict(model.dims),
        "tasks": [asdict(t) for t in model.tasks],
        "fingerprint": model.variant.fingerprint(model.dims, model.tasks),
    }


def save_checkpoint(path, model: NeuralProcessModel, optimizer: Optional[Adam] = None, step: int = 0,
                    extra: Optional[dict] = None) -> Path:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    meta = dict(model_meta(model), step=int(step),
                optimizer_steps=0 if optimizer is None else optimizer.step_count)
    if extra:
        meta["extra"] = extra
    return save_tensors(path, tensors, meta)


def model_from_meta(meta: dict) -> NeuralProcessModel:
    variant = ModelVariant(**meta["variant"])
    dims = ModelDims(**meta["dims"])
    tasks = [TaskSpec(**t) for t in meta["tasks"]]
    return build_model(variant, dims, tasks)


def load_checkpoint(path, expected_fingerprint: Optional[str] = None,
                    model: Optional[NeuralProcessModel] = None,
                    optimizer: Optional[Adam] = None) -> Tuple[NeuralProcessModel, dict]:
    """Restore a model (built from the stored record unless given) and optimizer state.

    Raises:
        ArtifactMismatch: the stored fingerprint differs from the expected one
            or from the given model's.
    """
    tensors, meta = load_tensors(path)
    stored = meta.get("fingerprint")
    if expected_fingerprint is not None and stored != expected_fingerprint:
        raise ArtifactMismatch(f"{path}: checkpoint fingerprint {stored} != expected {expected_fingerprint}")
    if model is None:
        model = model_from_meta(meta)
    else:
        own = model.variant.fingerprint(model.dims, model.tasks)
        if own != stored:
            raise ArtifactMismatch(f"{path}: checkpoint fingerprint {stored} != model {own}")
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    if optimizer is not None:
        optimizer.load_state_tensors(tensors, meta.get("optimizer_steps", 0))
    return model, meta


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    model: NeuralProcessModel
    optimizer: Adam
    trace: List[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    step: int = 0


def read_trace(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def write_trace(path, rows: Sequence[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in TRACE_COLUMNS[1:]])


def train_loop(model: NeuralProcessModel, config: TrainConfig, split: FunctionSplit,
               out_dir=None, run_id: str = "run", resume_from=None,
               callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Optimize the negated bound with Adam under the warmup/annealing schedules.

    Writes ``{run_id}_trace.csv`` and checkpoints ``{run_id}_{step}.ckpt``
    into ``out_dir`` when given (one every ``checkpoint_every`` steps plus the
    final one).

    Raises:
        TrainingDiverged: non-finite loss or gradient; ``diagnostics`` holds
            the step, the batch seed pair and the noise seed.
    """
    optimizer = Adam(model)
    start = 1
    trace: List[dict] = []
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        _, meta = load_checkpoint(resume_from, model=model, optimizer=optimizer)
        start = int(meta["step"]) + 1
        trace_file = None if out is None else out / f"{run_id}_trace.csv"
        if trace_file is not None and trace_file.exists():
            # the interrupted run's final row is off the logging grid unless it lands on it
            trace = [r for r in read_trace(trace_file)
                     if r["step"] < start and r["step"] % config.log_every == 0]
    gamma = effective_gamma(model.variant, config)
    dtype = next(model.parameters()).dtype
    model.train()
    last_ckpt = None
    step = start - 1
    for step, batch, noise_seed in BatchStream(split, config, gamma, start, config.n_iters):
        batch = batch.to(dtype)
        gen = torch.Generator().manual_seed(noise_seed)
        beta = beta_schedule(step, config.beta_warmup)
        lr = lr_schedule(step, config.base_lr, config.lr_warmup, config.lr_reading, config.n_iters)
        diag = {"step": step, "batch_seed": [config.seed, step], "noise_seed": noise_seed}
        try:
            terms = elbo(model, batch, gen, beta=beta, per_label=config.per_label)
        except DomainError as exc:
            # non-finite activations surface as invalid variances
            raise TrainingDiverged(f"step {step}: {exc}", diagnostics=diag) from exc
        if not bool(torch.isfinite(terms.loss)):
            raise TrainingDiverged(f"non-finite loss at step {step}", diagnostics=diag)
        model.zero_grad(set_to_none=True)
        terms.loss.backward()
        if config.grad_clip is not None:
            clip_grad_norm(model, config.grad_clip)
        try:
            optimizer.step(lr)
        except TrainingDiverged as exc:
            raise TrainingDiverged(str(exc), diagnostics=diag) from exc
        if step % config.log_every == 0 or step == config.n_iters:
            f = terms.as_floats()
            row = {"step": step, "loss": f["loss"], "recon": f["recon"], "kl_z": f["kl_z"],
                   "kl_v_total": f["kl_v"], "lr": lr, "beta": beta}
            trace.append(row)
            if callback is not None:
                callback(row)
        if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            last_ckpt = save_checkpoint(checkpoint_path(out, run_id, step), model, optimizer, step,
                                        {"train_config": config.to_dict(), "run_id": run_id})
            write_trace(out / f"{run_id}_trace.csv", trace)
    if out is not None:
        final = checkpoint_path(out, run_id, step)
        if last_ckpt != final:
            last_ckpt = save_checkpoint(final, model, optimizer, step,
                                        {"train_config": config.to_dict(), "run_id": run_id})
        write_trace(out / f"{run_id}_trace.csv", trace)
    model.eval()
    return TrainResult(model, optimizer, trace, last_ckpt, step)
