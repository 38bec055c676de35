"""Experiment orchestration: single runs, sweeps, and the ablation grid.

A run directory is self-describing: config snapshot with hash, partition
assignment, per-round checkpoints, metrics CSV, and a summary. Re-invoking
an experiment on an existing directory resumes from the newest checkpoint
and reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config, save_config
from .datasets import LabeledImages, load_dataset
from .errors import ConfigError, SemflError
from .extraction import encode_class_prompts, extract_visual_features
from .fl import GlobalState, MetricsRecord, evaluate, run_rounds
from .models import build_model, flatten_params
from .partition import build_partition, save_partition
from .providers import make_provider
from .store import FeatureStore, load_store, save_store
from .seeding import derive_int_seed

__all__ = ["run_experiment", "run_sweep", "reproduce_ablation",
           "MetricsRecord", "write_metrics_csv", "read_metrics_csv"]

CSV_COLUMNS = ("round", "test_acc", "mean_ce", "mean_kd", "mean_con",
               "clients", "wall_time_s")

SWEEP_AXES = ("temperature", "clients", "epochs")

# Ablation grid: anchor guidance (kd) crossed with semantic alignment (con).
ABLATION_CELLS = (("baseline", False, False), ("guidance_only", True, False),
                  ("alignment_only", False, True), ("full", True, True))


def write_metrics_csv(records: list[MetricsRecord], path: str | Path) -> None:
    """Plain-text CSV with shortest-round-trip float formatting."""
    lines = [",".join(CSV_COLUMNS)]
    for r in records:
        lines.append(",".join([
            str(r.round), repr(float(r.test_acc)), repr(float(r.mean_ce)),
            repr(float(r.mean_kd)), repr(float(r.mean_con)),
            "|".join(str(c) for c in r.clients),
            repr(float(r.wall_time_s))]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path: str | Path) -> list[MetricsRecord]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or tuple(lines[0].split(",")) != CSV_COLUMNS:
        raise ConfigError(f"{path} is not a metrics file")
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        records.append(MetricsRecord(
            round=int(parts[0]), test_acc=float(parts[1]),
            mean_ce=float(parts[2]), mean_kd=float(parts[3]),
            mean_con=float(parts[4]),
            clients=[int(c) for c in parts[5].split("|") if c],
            wall_time_s=float(parts[6])))
    return records


def _as_config(config) -> ExperimentConfig:
    if isinstance(config, ExperimentConfig):
        config.validate()
        return config
    return load_config(config)


def load_experiment_dataset(cfg: ExperimentConfig):
    """The train/test splits an experiment config describes."""
    return load_dataset(
        cfg.dataset.name, cache_dir=cfg.dataset.cache_dir,
        train_samples=cfg.dataset.train_samples,
        test_samples=cfg.dataset.test_samples,
        num_classes=cfg.dataset.num_classes,
        image_size=cfg.dataset.image_size, seed=cfg.seed,
        noise=cfg.dataset.noise, jitter=cfg.dataset.jitter,
        signal=cfg.dataset.signal, detail=cfg.dataset.detail,
        download=cfg.dataset.download)


def build_feature_store(train: LabeledImages, cfg: ExperimentConfig,
                        store_dir: str | Path | None = None) -> FeatureStore:
    """Extract anchors for the training set with the configured provider."""
    if cfg.provider != "synthetic":
        raise ConfigError(
            "on-the-fly extraction is only available with the synthetic "
            "provider; build a store first with: semfl extract-features "
            "--provider diffusion ... and point store_dir at it")
    provider = make_provider("synthetic", labels=train.labels,
                             class_names=train.class_names,
                             seed=derive_int_seed(cfg.seed, 701))
    visual = extract_visual_features(train.images, cfg.extraction, provider)
    text = encode_class_prompts(train.class_names, cfg.extraction, provider)
    store = FeatureStore(visual=visual, text=text)
    if store_dir is not None:
        save_store(visual, text, store_dir)
    return store


def _obtain_store(train: LabeledImages, cfg: ExperimentConfig,
                  run_dir: Path) -> FeatureStore:
    expected = cfg.extraction.content_hash()
    if cfg.store_dir is not None:
        if not (Path(cfg.store_dir).expanduser() / "manifest.json").is_file():
            raise ConfigError(
                f"store_dir {cfg.store_dir} holds no feature store; run "
                "`semfl extract-features --out <dir>` first or drop "
                "store_dir to extract on the fly")
        return load_store(cfg.store_dir, expected_config_hash=expected)
    cached = run_dir / "store"
    if (cached / "manifest.json").is_file():
        try:
            return load_store(cached, expected_config_hash=expected)
        except SemflError:
            pass  # stale cache from an older config: rebuild below
    if cfg.provider != "synthetic":
        raise ConfigError(
            "no feature store configured: run `semfl extract-features "
            f"--provider {cfg.provider} --out <dir>` and set store_dir, or "
            "use provider: synthetic for on-the-fly extraction")
    return build_feature_store(train, cfg, store_dir=cached)


def _check_run_dir(cfg: ExperimentConfig, run_dir: Path) -> None:
    snapshot = run_dir / "config.json"
    if snapshot.is_file():
        stored = json.loads(snapshot.read_text()).get("config_hash")
        if stored != cfg.config_hash():
            raise ConfigError(
                f"{run_dir} already holds a run with config hash {stored}, "
                f"current config hashes to {cfg.config_hash()}; pick a fresh "
                f"output_dir or restore the matching config")
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, snapshot)


def run_experiment(config) -> Path:
    """Execute one federated run end to end; returns the run directory.

    The directory accumulates: config.json, partition.json, store/ (when
    extraction happens here), checkpoints/, metrics.csv, summary.json.
    """
    cfg = _as_config(config)
    run_dir = Path(cfg.output_dir).expanduser()
    _check_run_dir(cfg, run_dir)

    train, test = load_experiment_dataset(cfg)

    pmap = build_partition(train.labels, cfg.partition)
    save_partition(run_dir / "partition.json", pmap, cfg.partition)

    store = None
    if cfg.training.algorithm == "semanticfl":
        store = _obtain_store(train, cfg, run_dir)

    model = build_model(cfg.backbone)
    state = GlobalState(params=flatten_params(model))
    state, metrics = run_rounds(
        state, cfg.backbone, pmap, store, train.images, train.labels,
        test.images, test.labels, cfg.training, cfg.rounds,
        run_dir=run_dir, config_hash=cfg.config_hash())

    write_metrics_csv(metrics, run_dir / "metrics.csv")
    if metrics:
        final_acc = metrics[-1].test_acc
        best = max(metrics, key=lambda r: (r.test_acc, -r.round))
        best_acc, best_round = best.test_acc, best.round
    else:
        final_acc = best_acc = evaluate(state.params, cfg.backbone,
                                        test.images, test.labels)
        best_round = 0
    (run_dir / "summary.json").write_text(json.dumps(
        {"final_acc": final_acc, "best_acc": best_acc,
         "best_round": best_round, "config_hash": cfg.config_hash()},
        indent=1, sort_keys=True) + "\n")
    return run_dir


def _sweep_cell_config(cfg: ExperimentConfig, axis: str,
                       value) -> ExperimentConfig:
    if axis == "temperature":
        weights = replace(cfg.training.weights, tau=float(value))
        return replace(cfg, training=replace(cfg.training, weights=weights))
    if axis == "clients":
        return replace(cfg, partition=replace(cfg.partition,
                                              num_clients=int(value)))
    return replace(cfg, training=replace(cfg.training,
                                         local_epochs=int(value)))


def run_sweep(config, axis: str, values: list) -> Path:
    """One run per value along an axis, same seed everywhere.

    A failing cell is recorded as failed and does not stop its siblings.
    """
    cfg = _as_config(config)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; "
                          f"expected one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis in ("clients", "epochs"):
        if any(int(v) != float(v) or int(v) < 1 for v in values):
            raise ConfigError(f"{axis} values must be positive integers")
        values = [int(v) for v in values]
    else:
        values = [float(v) for v in values]

    sweep_dir = Path(cfg.output_dir).expanduser()
    sweep_dir.mkdir(parents=True, exist_ok=True)
    cells = []
    for value in values:
        cell_dir = sweep_dir / f"{axis}_{value}"
        cell_cfg = _sweep_cell_config(
            replace(cfg, output_dir=str(cell_dir)), axis, value)
        cell = {"value": value, "run_dir": str(cell_dir)}
        try:
            run_experiment(cell_cfg)
            summary = json.loads((cell_dir / "summary.json").read_text())
            cell.update(status="ok", final_acc=summary["final_acc"],
                        best_acc=summary["best_acc"])
        except Exception as exc:
            cell.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        cells.append(cell)
    (sweep_dir / "sweep_summary.json").write_text(json.dumps(
        {"axis": axis, "values": values, "seed": cfg.seed, "cells": cells},
        indent=1, sort_keys=True) + "\n")
    return sweep_dir


def _ablation_cell_config(cfg: ExperimentConfig, kd_on: bool, con_on: bool,
                          seed: int, cell_dir: Path) -> ExperimentConfig:
    weights = replace(cfg.training.weights,
                      lambda_kd=cfg.training.weights.lambda_kd if kd_on else 0.0,
                      lambda_con=cfg.training.weights.lambda_con if con_on else 0.0)
    shift = seed - cfg.seed
    return replace(
        cfg, seed=seed, output_dir=str(cell_dir),
        partition=replace(cfg.partition, seed=cfg.partition.seed + shift),
        extraction=replace(cfg.extraction, seed=cfg.extraction.seed + shift),
        backbone=replace(cfg.backbone, seed=cfg.backbone.seed + shift),
        training=replace(cfg.training, weights=weights,
                         seed=cfg.training.seed + shift))


def reproduce_ablation(config, seeds: list[int] | None = None) -> Path:
    """Run the two-factor ablation grid and tabulate the results.

    Cells share each seed's partition, initialization, and client schedule,
    so differences come only from the loss terms that are switched on. The
    all-off cell follows exactly the plain weighted-averaging trajectory.
    """
    cfg = _as_config(config)
    if cfg.training.algorithm != "semanticfl":
        raise ConfigError("the ablation grid applies to algorithm: semanticfl")
    w = cfg.training.weights
    if w.lambda_kd == 0.0 or w.lambda_con == 0.0:
        raise ConfigError("ablation needs nonzero lambda_kd and lambda_con "
                          "as the switched-on values")
    seeds = list(seeds) if seeds else [cfg.seed]
    grid_dir = Path(cfg.output_dir).expanduser()
    grid_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    table: dict[str, dict] = {}
    for name, kd_on, con_on in ABLATION_CELLS:
        accs = []
        for seed in seeds:
            cell_dir = grid_dir / name / f"seed_{seed}"
            cell_cfg = _ablation_cell_config(cfg, kd_on, con_on, seed,
                                             cell_dir)
            run_experiment(cell_cfg)
            summary = json.loads((cell_dir / "summary.json").read_text())
            accs.append(summary["final_acc"])
            rows.append((name, seed, summary["final_acc"],
                         summary["best_acc"]))
        table[name] = {"lambda_kd": w.lambda_kd if kd_on else 0.0,
                       "lambda_con": w.lambda_con if con_on else 0.0,
                       "final_accs": accs,
                       "mean_final_acc": float(np.mean(accs))}

    lines = ["cell,seed,final_acc,best_acc"]
    lines += [f"{n},{s},{repr(float(f))},{repr(float(b))}"
              for n, s, f, b in rows]
    (grid_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    (grid_dir / "ablation.json").write_text(json.dumps(
        {"seeds": seeds, "cells": table}, indent=1, sort_keys=True) + "\n")
    return grid_dir
