"""Command-line experiment runner.

Usage::

    mtnp <generate|train|eval|transfer|check|plot> [--config FILE] [--desk-scale] [--jobs N] [key=value ...]

Exit codes: 0 success, 1 usage or input error, 2 numeric failure (diverged
training or failed process check), 3 checkpoint/config mismatch.
"""

import argparse
import functools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from mtnp.datasets.sampling import context_from_target, make_batch, target_batch
from mtnp.errors import ArtifactMismatch, MTNPError, TrainingDiverged
from mtnp.evaluation.checks import (
    check_consistency,
    check_exchangeability,
    order_dependent_mock,
    target_coupling_mock,
)
from mtnp.evaluation.imputation import ImputedJointPredictor
from mtnp.evaluation.metrics import MetricsReport, evaluate_split, format_aggregate
from mtnp.evaluation.transfer import pair_gains, transfer_table, write_transfer_csv
from mtnp.experiment import (
    ExperimentConfig,
    build_experiment_model,
    expected_fingerprint,
    load_config_file,
    load_data,
    parse_override,
    resolve_config,
)
from mtnp.training import checkpoint_path, load_checkpoint, train_loop

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISMATCH = 0, 1, 2, 3
COMMANDS = ("generate", "train", "eval", "transfer", "check", "plot")

log = logging.getLogger("mtnp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtnp", description="Multi-task neural process experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file of config values")
    p.add_argument("--desk-scale", action="store_true", help="reduced width and iteration budget")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for evaluation cells")
    p.add_argument("--variant", help="shorthand for variant=NAME")
    p.add_argument("--dataset", help="shorthand for dataset=NAME")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def config_from_args(args) -> ExperimentConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = dict(parse_override(o) for o in args.overrides)
    if args.variant:
        overrides["variant"] = args.variant
    if args.dataset:
        overrides["dataset"] = args.dataset
    return resolve_config(file_values, overrides, args.desk_scale)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sidecar(path: Path, cfg: ExperimentConfig):
    """Embed the full config next to an artifact that cannot carry it inline."""
    _write_json(path.with_name(path.name + ".config.json"), cfg.to_dict())


# ---------------------------------------------------------------- commands

def cmd_generate(cfg: ExperimentConfig) -> int:
    data = load_data(cfg)
    tag = cfg.dataset if cfg.dataset == "weather" else f"synthetic-{cfg.correlation}"
    path = cfg.output_root() / "data" / f"{tag}_seed{cfg.data_seed}" / "manifest.json"
    _write_json(path, {"manifest": data.manifest, "config": cfg.to_dict()})
    for name, split in data.splits.items():
        print(f"{name}: {len(split)} functions x {split.x.shape[1]} points x {split.n_tasks} tasks")
    print(f"checksum: {data.manifest['checksum']}")
    print(f"manifest: {path}")
    return EXIT_OK


def _final_checkpoint(cfg: ExperimentConfig, run_name: Optional[str] = None) -> Path:
    if cfg.checkpoint:
        return Path(cfg.checkpoint)
    name = run_name or cfg.run_name
    return checkpoint_path(cfg.output_root() / name, name, cfg.n_iters)


def _load_model(cfg: ExperimentConfig, task_names, path: Path, variant: Optional[str] = None):
    model, meta = load_checkpoint(path, expected_fingerprint(cfg, task_names, variant))
    return model.eval()


def cmd_train(cfg: ExperimentConfig) -> int:
    if cfg.variant == "s_jtnp":
        raise UsageError("s_jtnp is a composition; train stnp and jtnp separately")
    data = load_data(cfg)
    split = data.splits["train"]
    model = build_experiment_model(cfg, split.task_names)
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json", cfg.to_dict())
    tcfg = cfg.train_config()
    if model.variant.requires_complete_context and tcfg.train_gamma != 0.0:
        log.info("jtnp trains on complete contexts; missing rate forced to 0")
    res = train_loop(model, tcfg, split, run_dir, cfg.run_name, cfg.resume,
                     callback=lambda r: log.info("step %d loss %.4f", r["step"], r["loss"]))
    print(f"checkpoint: {res.checkpoint}")
    print(f"trace: {run_dir / (cfg.run_name + '_trace.csv')}")
    return EXIT_OK


@functools.lru_cache(maxsize=2)
def _eval_context(cfg_json: str):
    cfg = ExperimentConfig(**json.loads(cfg_json))
    split = load_data(cfg).splits[cfg.eval_split]
    predictor, model = _predictor(cfg, split.task_names)
    return cfg, split, predictor, model


def _eval_cell(payload):
    cfg_json, m, gamma, seed = payload
    torch.set_num_threads(1)
    cfg, split, predictor, model = _eval_context(cfg_json)
    res = evaluate_split(model, split, m, gamma, seed, cfg.n_z, cfg.n_v, cfg.pred_mode, predictor=predictor)
    return (m, gamma, seed), res


def _predictor(cfg: ExperimentConfig, task_names):
    if cfg.variant == "s_jtnp":
        if not cfg.imputer_checkpoint:
            raise UsageError("s_jtnp needs imputer_checkpoint (stnp) and checkpoint (jtnp)")
        if not cfg.checkpoint:
            raise UsageError("s_jtnp needs checkpoint (jtnp)")
        stnp = _load_model(cfg, task_names, Path(cfg.imputer_checkpoint), "stnp")
        jtnp = _load_model(cfg, task_names, Path(cfg.checkpoint), "jtnp")
        return ImputedJointPredictor(stnp, jtnp, cfg.n_z, cfg.pred_mode), jtnp
    return None, _load_model(cfg, task_names, _final_checkpoint(cfg))


def cmd_eval(cfg: ExperimentConfig, jobs: int = 1) -> int:
    data = load_data(cfg)
    split = data.splits[cfg.eval_split]
    _predictor(cfg, split.task_names)  # fail fast on missing or mismatched checkpoints
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True)
    cells = [(cfg_json, m, g, s) for m in cfg.eval_m for g in cfg.eval_gammas for s in cfg.eval_seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(_eval_cell, cells))
    else:
        results = dict(map(_eval_cell, cells))
    report = MetricsReport()
    sample_mean_nll = []
    for key in sorted(results):
        m, g, s = key
        report.add(cfg.dataset, cfg.variant, m, g, s, results[key])
        for task, vals in results[key].items():
            sample_mean_nll.append({"task": task, "m": m, "gamma": g, "seed": s,
                                    "nll_sample_mean": vals["nll_sample_mean"]})
    run_dir = cfg.run_dir()
    path = run_dir / "metrics.csv"
    run_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(path)
    _sidecar(path, cfg)
    summary = {metric: report.aggregate(metric) for metric in ("mse", "nmse", "nll")}
    _write_json(run_dir / "metrics_summary.json",
                {"config": cfg.to_dict(), "aggregate": summary, "nll_sample_mean": sample_mean_nll})
    print(format_aggregate(summary["nmse" if cfg.dataset == "synthetic" else "mse"]))
    print(f"metrics: {path}")
    return EXIT_OK


def cmd_transfer(cfg: ExperimentConfig) -> int:
    data = load_data(cfg)
    split = data.splits[cfg.eval_split]
    model = _load_model(cfg, split.task_names, _final_checkpoint(cfg))
    pool = cfg.transfer_pool if cfg.transfer_pool is not None else cfg.context_range[1] - 1
    rows = transfer_table(model, split, cfg.transfer_seed, pool, normalize=cfg.dataset == "synthetic")
    run_dir = cfg.run_dir()
    path = run_dir / "transfer.csv"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_transfer_csv(path, rows)
    _sidecar(path, cfg)
    pairs = pair_gains(rows)
    _write_json(run_dir / "transfer_pairs.json",
                {"config": cfg.to_dict(),
                 "pairs": [{"source": s, "target": t, "gain_pct": g} for (s, t), g in pairs.items()]})
    for (s, t), g in pairs.items():
        print(f"{s:>9s} -> {t:<9s} {g:+7.2f}%")
    print(f"transfer: {path}")
    return EXIT_OK


def cmd_check(cfg: ExperimentConfig) -> int:
    data = load_data(cfg)
    split = data.splits[cfg.eval_split]
    path = _final_checkpoint(cfg)
    model = _load_model(cfg, split.task_names, path) if path.exists() or cfg.checkpoint else \
        build_experiment_model(cfg, split.task_names)
    rng = np.random.default_rng(cfg.seed)
    gamma = 0.0 if model.variant.requires_complete_context else 0.5
    n_target = min(40, split.x.shape[1])
    batch = make_batch(rng, split, np.arange(min(4, len(split))), min(10, n_target), gamma, n_target=n_target)
    reports = [check_exchangeability(model, batch, rng, cfg.check_trials),
               check_consistency(model, batch, rng, cfg.check_trials)]
    controls = [check_exchangeability(order_dependent_mock(model), batch, rng, 5),
                check_consistency(target_coupling_mock(model), batch, rng, 5)]
    lines = [r.line() for r in reports]
    lines += [f"negative control ({'rejected' if not c.passed else 'NOT rejected'}) {c.line()}" for c in controls]
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "checks.txt"
    out.write_text("\n".join(lines) + "\n")
    _sidecar(out, cfg)
    print("\n".join(lines))
    ok = all(r.passed for r in reports) and not any(c.passed for c in controls)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_plot(cfg: ExperimentConfig) -> int:
    from mtnp.evaluation.predictive import mc_predictive
    from mtnp.plotting import plot_function

    data = load_data(cfg)
    split = data.splits[cfg.eval_split]
    predictor, model = _predictor(cfg, split.task_names)
    rng = np.random.default_rng([cfg.seed, cfg.plot_m])
    gen = torch.Generator().manual_seed(cfg.seed)
    n = min(cfg.plot_functions, len(split))
    batch = context_from_target(rng, target_batch(split, np.arange(n)), cfg.plot_m, cfg.plot_gamma)
    pred = predictor(batch, gen) if predictor is not None else \
        mc_predictive(model, batch, gen, cfg.n_z, cfg.n_v, cfg.pred_mode)
    p = pred.params
    mix_var = p.var.mean(0) + p.mean.var(0, unbiased=False)
    description = json.dumps(cfg.to_dict(), sort_keys=True)
    paths = []
    for i in range(n):
        mc = batch.mask_context[i].numpy()
        xc = batch.x_context[i, :, 0].numpy()
        yc = batch.y_context[i].numpy()
        paths.append(plot_function(
            cfg.run_dir() / "plots" / f"function_{i:03d}.svg",
            batch.x_target[i, :, 0].numpy(), batch.y_target[i].numpy(), pred.mean[i].numpy(),
            mix_var[i].sqrt().numpy(), [xc[mc[:, t]] for t in range(split.n_tasks)],
            [yc[mc[:, t], t] for t in range(split.n_tasks)], split.task_names,
            title=f"{cfg.variant}  m={cfg.plot_m}  gamma={cfg.plot_gamma}", description=description))
    for path in paths:
        print(f"plot: {path}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_intermixed_args(argv)
        cfg = config_from_args(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.jobs)
        if args.command == "transfer":
            return cmd_transfer(cfg)
        if args.command == "check":
            return cmd_check(cfg)
        return cmd_plot(cfg)
    except UsageError as exc:
        print(f"mtnp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"mtnp: training diverged: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC
    except ArtifactMismatch as exc:
        print(f"mtnp: artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except MTNPError as exc:
        print(f"mtnp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"mtnp: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
