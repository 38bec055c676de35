"""Figures from run directories: accuracy curves, sweep charts, embeddings.

Every figure is written as a PNG next to the data it came from, and the
embedding plot records its hyperparameters in a sidecar JSON so the figure
can be regenerated exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .config import ExperimentConfig, config_from_dict
from .errors import ConfigError
from .experiments import load_experiment_dataset, read_metrics_csv
from .fl import _latest_checkpoint
from .models import build_model, forward, images_to_batch, load_checkpoint, \
    unflatten_params
from .seeding import rng

_TAG_TSNE_SUBSET = 801


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing input {path}; it is produced by "
                          f"`{produced_by}`")
    return path


def load_run_config(run_dir: str | Path) -> ExperimentConfig:
    """Rebuild the experiment config from a run directory's snapshot."""
    doc = json.loads(_require(Path(run_dir) / "config.json",
                              "semfl train").read_text())
    doc.pop("config_hash", None)
    return config_from_dict(doc)


def plot_accuracy(run_dir: str | Path, out: str | Path | None = None) -> Path:
    """Accuracy against round from a run's metrics file."""
    run_dir = Path(run_dir)
    records = read_metrics_csv(_require(run_dir / "metrics.csv",
                                        "semfl train"))
    out = Path(out) if out else run_dir / "accuracy.png"
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r.round for r in records], [r.test_acc for r in records],
            marker="o", markersize=3)
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def plot_sweep(sweep_dir: str | Path, out: str | Path | None = None) -> Path:
    """Final accuracy against the swept value; failed cells are marked."""
    sweep_dir = Path(sweep_dir)
    doc = json.loads(_require(sweep_dir / "sweep_summary.json",
                              "semfl sweep").read_text())
    out = Path(out) if out else sweep_dir / "sweep.png"
    ok = [(c["value"], c["final_acc"]) for c in doc["cells"]
          if c["status"] == "ok"]
    bad = [c["value"] for c in doc["cells"] if c["status"] != "ok"]
    fig, ax = plt.subplots(figsize=(6, 4))
    if ok:
        xs, ys = zip(*ok)
        ax.plot(xs, ys, marker="o")
    for x in bad:
        ax.axvline(x, color="red", linestyle=":", alpha=0.6)
        ax.annotate("failed", (x, 0.02), color="red", rotation=90,
                    va="bottom")
    ax.set_xlabel(doc["axis"])
    ax.set_ylabel("final test accuracy")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def tsne_embed(features: np.ndarray, perplexity: float = 30.0,
               seed: int = 0) -> tuple[np.ndarray, dict]:
    """Two-dimensional t-SNE of a feature matrix; returns (coords, params).

    Perplexity is clamped below the sample count as the method requires;
    the returned params record the values actually used.
    """
    from sklearn.manifold import TSNE
    n = features.shape[0]
    if n < 8:
        raise ConfigError("need at least 8 samples to embed")
    used = float(min(perplexity, (n - 1) / 3))
    tsne = TSNE(n_components=2, perplexity=used, init="pca",
                random_state=seed)
    coords = tsne.fit_transform(np.asarray(features, dtype=np.float64))
    params = {"method": "tsne", "n_components": 2, "perplexity": used,
              "init": "pca", "random_state": seed, "n_samples": int(n)}
    return np.asarray(coords), params


def plot_embedding(run_dir: str | Path, out: str | Path | None = None,
                   max_samples: int = 1000, perplexity: float = 30.0,
                   seed: int = 0) -> Path:
    """Embed held-out features of the final model, colored by class."""
    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    ckpt = _latest_checkpoint(run_dir, cfg.rounds)
    if ckpt is None:
        raise ConfigError(f"no checkpoints under {run_dir}; run "
                          f"`semfl train` first")
    spec, params, _ = load_checkpoint(ckpt)
    model = build_model(spec)
    unflatten_params(model, params)
    model.eval()

    _, test = load_experiment_dataset(cfg)
    n = test.labels.size
    take = np.arange(n)
    if n > max_samples:
        take = np.sort(rng(seed, _TAG_TSNE_SUBSET).choice(
            n, size=max_samples, replace=False))
    import torch
    feats = []
    with torch.no_grad():
        for start in range(0, take.size, 256):
            batch = images_to_batch(test.images[take[start:start + 256]])
            feats.append(forward(model, batch).features.numpy())
    features = np.concatenate(feats)
    labels = test.labels[take]

    coords, used = tsne_embed(features, perplexity=perplexity, seed=seed)
    out = Path(out) if out else run_dir / "embedding.png"
    fig, ax = plt.subplots(figsize=(6, 6))
    cmap = plt.get_cmap("tab20" if test.num_classes > 10 else "tab10")
    for c in range(test.num_classes):
        mask = labels == c
        if mask.any():
            ax.scatter(coords[mask, 0], coords[mask, 1], s=6,
                       color=cmap(c % 20), label=test.class_names[c])
    if test.num_classes <= 20:
        ax.legend(markerscale=2, fontsize=7, loc="best")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    used["checkpoint"] = ckpt.name
    used["max_samples"] = max_samples
    Path(str(out) + ".json").write_text(json.dumps(used, indent=1,
                                                   sort_keys=True) + "\n")
    return out


def emit_plots(run_dir: str | Path, embedding: bool = False,
               sweep: bool = False, **kwargs) -> list[Path]:
    """Produce the standard figures for a run or sweep directory."""
    outputs = []
    if sweep:
        outputs.append(plot_sweep(run_dir))
    else:
        outputs.append(plot_accuracy(run_dir))
        if embedding:
            outputs.append(plot_embedding(run_dir, **kwargs))
    return outputs
