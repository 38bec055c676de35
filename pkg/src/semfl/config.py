"""Experiment configuration: strict YAML parsing, validation, hashing.

A config file has five sections (dataset, partition, extraction, training,
backbone) plus a handful of top-level keys. Unknown keys anywhere are hard
errors, and validation reports every violation at once rather than stopping
at the first. The identity hash covers everything that changes results;
locations (output or cache directories) are excluded.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .datasets import DATASETS
from .errors import ConfigError, SemflError
from .extraction import FeatureExtractionConfig
from .fl import RoundConfig
from .losses import LossWeights
from .models import BackboneSpec
from .partition import PartitionSpec

PROVIDERS = ("synthetic", "diffusion")

# Archives fix their own label space and resolution.
_ARCHIVE_SHAPES = {"cifar10": (10, 32), "cifar100": (100, 32),
                   "tinyimagenet": (200, 64)}


@dataclass(frozen=True)
class DatasetConfig:
    """Which corpus to load and how much of it."""

    name: str = "synthetic"
    cache_dir: str = "~/.cache/semfl"
    train_samples: int | None = None
    test_samples: int | None = None
    num_classes: int = 10
    image_size: int = 32
    noise: float = 0.18
    jitter: float = 0.5
    signal: float = 0.7
    detail: float = 0.15
    download: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs, resolved and cross-checked."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionSpec = field(default_factory=lambda: PartitionSpec(
        scenario="dirichlet", num_clients=10, seed=0, alpha=0.5))
    extraction: FeatureExtractionConfig = field(
        default_factory=FeatureExtractionConfig)
    training: RoundConfig = field(default_factory=RoundConfig)
    backbone: BackboneSpec = field(default_factory=lambda: BackboneSpec(
        architecture="resnet10", num_classes=10, feature_dim=512))
    rounds: int = 100
    seed: int = 0
    provider: str = "synthetic"
    output_dir: str = "runs/experiment"
    store_dir: str | None = None

    def validate(self) -> None:
        """Check every invariant; raise one error listing all violations."""
        problems: list[str] = []
        for name, spec in (("partition", self.partition),
                           ("extraction", self.extraction),
                           ("training", self.training),
                           ("backbone", self.backbone)):
            try:
                if name == "partition":
                    spec.validate(self.dataset.num_classes)
                else:
                    spec.validate()
            except SemflError as exc:
                problems.append(f"{name}: {exc}")
        if self.provider not in PROVIDERS:
            problems.append(f"provider must be one of {PROVIDERS}, "
                            f"got {self.provider!r}")
        if self.dataset.name not in DATASETS:
            problems.append(f"dataset.name must be one of {DATASETS}, "
                            f"got {self.dataset.name!r}")
        if self.rounds < 0:
            problems.append("rounds must be non-negative")
        if self.dataset.noise < 0 or self.dataset.jitter < 0:
            problems.append("dataset noise and jitter must be non-negative")
        if not 0.0 <= self.dataset.signal <= 1.0 \
                or not 0.0 <= self.dataset.detail <= 1.0:
            problems.append("dataset signal and detail must lie in [0, 1]")
        if self.dataset.num_classes < 2:
            problems.append("dataset.num_classes must be at least 2")
        shape = _ARCHIVE_SHAPES.get(self.dataset.name)
        if shape is not None and (self.dataset.num_classes, self.dataset.image_size) != shape:
            problems.append(
                f"{self.dataset.name} has {shape[0]} classes at size "
                f"{shape[1]}, got num_classes={self.dataset.num_classes} "
                f"image_size={self.dataset.image_size}")
        if self.training.clients_per_round > self.partition.num_clients:
            problems.append(
                f"training.clients_per_round={self.training.clients_per_round}"
                f" exceeds partition.num_clients={self.partition.num_clients}")
        if self.backbone.num_classes != self.dataset.num_classes:
            problems.append(
                f"backbone.num_classes={self.backbone.num_classes} does not "
                f"match the dataset's {self.dataset.num_classes} classes")
        if self.backbone.feature_dim != self.extraction.feature_dim:
            problems.append(
                f"backbone.feature_dim={self.backbone.feature_dim} does not "
                f"match extraction.feature_dim={self.extraction.feature_dim}")
        if self.backbone.input_size != self.dataset.image_size:
            problems.append(
                f"backbone.input_size={self.backbone.input_size} does not "
                f"match dataset.image_size={self.dataset.image_size}")
        if problems:
            raise ConfigError("invalid configuration:\n  - " +
                              "\n  - ".join(problems))

    def to_dict(self) -> dict:
        doc = {
            "seed": self.seed, "rounds": self.rounds,
            "provider": self.provider, "output_dir": self.output_dir,
            "store_dir": self.store_dir,
            "dataset": vars(self.dataset).copy(),
            "partition": {k: v for k, v in vars(self.partition).items()
                          if v is not None},
            "extraction": {**vars(self.extraction),
                           "layer_ids": list(self.extraction.layer_ids)},
            "training": {**vars(self.training),
                         "weights": vars(self.training.weights).copy()},
            "backbone": vars(self.backbone).copy(),
        }
        return doc

    def config_hash(self) -> str:
        doc = self.to_dict()
        # Locations do not change results.
        for key in ("output_dir", "store_dir"):
            doc.pop(key)
        doc["dataset"].pop("cache_dir")
        doc["dataset"].pop("download")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _section(raw: dict, name: str, problems: list[str]) -> dict:
    part = raw.pop(name, {})
    if part is None:
        part = {}
    if not isinstance(part, dict):
        problems.append(f"section {name!r} must be a mapping")
        return {}
    return part


def _check_unknown(part: dict, allowed, name: str,
                   problems: list[str]) -> None:
    unknown = sorted(set(part) - set(allowed))
    if unknown:
        problems.append(f"unknown key(s) in {name}: {', '.join(unknown)}")
        for key in unknown:
            part.pop(key)


def _dataclass_section(cls, part: dict, name: str, problems: list[str],
                       overrides: dict | None = None, **required):
    names = [f.name for f in fields(cls)]
    _check_unknown(part, names, name, problems)
    merged = {**required, **part, **(overrides or {})}
    try:
        return cls(**merged)
    except TypeError as exc:
        problems.append(f"{name}: {exc}")
        return None


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from a parsed document; strict about keys."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    raw = dict(raw)
    problems: list[str] = []
    seed = raw.pop("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append("seed must be an integer")
        seed = 0

    ds_part = _section(raw, "dataset", problems)
    pt_part = _section(raw, "partition", problems)
    ex_part = _section(raw, "extraction", problems)
    tr_part = _section(raw, "training", problems)
    bb_part = _section(raw, "backbone", problems)

    dataset = _dataclass_section(DatasetConfig, ds_part, "dataset", problems)
    if dataset is None:
        dataset = DatasetConfig()
    shape = _ARCHIVE_SHAPES.get(dataset.name)
    if shape is not None:
        fill = {}
        if "num_classes" not in ds_part:
            fill["num_classes"] = shape[0]
        if "image_size" not in ds_part:
            fill["image_size"] = shape[1]
        if fill:
            dataset = replace(dataset, **fill)

    partition = _dataclass_section(
        PartitionSpec, pt_part, "partition", problems,
        scenario=pt_part.get("scenario", "dirichlet"),
        num_clients=pt_part.get("num_clients", 10),
        seed=pt_part.get("seed", seed))
    if partition is not None and partition.scenario == "dirichlet" \
            and partition.alpha is None:
        partition = replace(partition, alpha=0.5)

    if "layer_ids" in ex_part and isinstance(ex_part["layer_ids"], list):
        ex_part["layer_ids"] = tuple(ex_part["layer_ids"])
    extraction = _dataclass_section(
        FeatureExtractionConfig, ex_part, "extraction", problems,
        overrides={"seed": ex_part.get("seed", seed)})

    weights_part = tr_part.pop("weights", {}) or {}
    if not isinstance(weights_part, dict):
        problems.append("training.weights must be a mapping")
        weights_part = {}
    _check_unknown(weights_part, [f.name for f in fields(LossWeights)],
                   "training.weights", problems)
    try:
        weights = LossWeights(**weights_part)
    except TypeError as exc:
        problems.append(f"training.weights: {exc}")
        weights = LossWeights()
    training = _dataclass_section(
        RoundConfig, tr_part, "training", problems,
        overrides={"weights": weights, "seed": tr_part.get("seed", seed)})

    backbone = _dataclass_section(
        BackboneSpec, bb_part, "backbone", problems,
        architecture=bb_part.get("architecture", "resnet10"),
        num_classes=bb_part.get("num_classes", dataset.num_classes),
        feature_dim=bb_part.get(
            "feature_dim",
            extraction.feature_dim if extraction else 512),
        overrides={"seed": bb_part.get("seed", seed),
                   "input_size": bb_part.get("input_size",
                                             dataset.image_size)})

    top = {"rounds": raw.pop("rounds", 100),
           "provider": raw.pop("provider", "synthetic"),
           "output_dir": raw.pop("output_dir", "runs/experiment"),
           "store_dir": raw.pop("store_dir", None)}
    if raw:
        problems.append(f"unknown top-level key(s): {', '.join(sorted(raw))}")
    if problems:
        raise ConfigError("invalid configuration:\n  - " +
                          "\n  - ".join(problems))

    cfg = ExperimentConfig(dataset=dataset, partition=partition,
                           extraction=extraction, training=training,
                           backbone=backbone, seed=seed, **top)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a YAML config file into a validated ExperimentConfig."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def preset_path(name: str) -> Path:
    """Path of a packaged preset config by bare name."""
    from importlib import resources
    folder = resources.files("semfl") / "presets"
    path = Path(str(folder / f"{name}.yaml"))
    if not path.is_file():
        have = sorted(p.stem for p in Path(str(folder)).glob("*.yaml"))
        raise ConfigError(f"unknown preset {name!r}; available: "
                          f"{', '.join(have)}")
    return path


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    """Write the resolved config with its hash as a JSON snapshot."""
    doc = cfg.to_dict()
    doc["config_hash"] = cfg.config_hash()
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
