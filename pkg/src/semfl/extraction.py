"""Offline anchor extraction: pooled backbone activations projected to d dims.

The visual path runs encode -> noise -> hooked forward -> pool -> concat ->
PCA projection once per dataset; the text path embeds one formatted prompt
per class and maps it through a fixed seeded orthonormal projection. Both
paths are deterministic given the config seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigError, InvalidInputError, ReducedRankError,
                     StateError)
from .providers import DEFAULT_LAYER_IDS, FeatureProvider
from .schedule import add_noise
from .seeding import derive_int_seed, rng

_TAG_DRAW = 401
_TAG_TEXT_PROJ = 402


@dataclass(frozen=True)
class FeatureExtractionConfig:
    """Knobs of the one-time extraction pass."""

    timestep: int = 150
    feature_dim: int = 512
    layer_ids: tuple[str, ...] = DEFAULT_LAYER_IDS
    gamma: float = 0.18215
    prompt_template: str = "a photo of a {name}"
    seed: int = 0

    def validate(self, num_timesteps: int | None = None) -> None:
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if not self.layer_ids:
            raise ConfigError("layer_ids must be non-empty")
        if self.timestep < 1:
            raise ConfigError("timestep must be >= 1")
        if num_timesteps is not None and self.timestep >= num_timesteps:
            raise ConfigError(
                f"timestep {self.timestep} outside the schedule's {num_timesteps} steps")
        if "{name}" not in self.prompt_template:
            raise ConfigError("prompt_template must contain a {name} placeholder")

    def content_hash(self) -> str:
        doc = {"timestep": self.timestep, "feature_dim": self.feature_dim,
               "layer_ids": list(self.layer_ids), "gamma": self.gamma,
               "prompt_template": self.prompt_template, "seed": self.seed}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class Projection:
    """Fitted linear reduction: rows are orthonormal principal directions."""

    components: np.ndarray | None = None  # d x D
    mean: np.ndarray | None = None        # D
    explained_variance: np.ndarray | None = None
    total_variance: float = 0.0

    def require_fitted(self) -> None:
        if self.components is None or self.mean is None:
            raise StateError("projection has not been fitted")

    def apply(self, raw: np.ndarray) -> np.ndarray:
        self.require_fitted()
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != self.mean.size:
            raise InvalidInputError(
                f"raw dimension {raw.shape[-1]} does not match projection {self.mean.size}")
        return (raw - self.mean) @ self.components.T

    def content_hash(self) -> str:
        self.require_fitted()
        h = hashlib.sha256()
        h.update(self.components.astype("<f8").tobytes())
        h.update(self.mean.astype("<f8").tobytes())
        return h.hexdigest()


@dataclass
class VisualFeatureSet:
    """Per-sample anchors in input order, plus provenance."""

    features: np.ndarray      # N x d, float32
    sample_ids: np.ndarray    # N
    manifest: dict
    projection: Projection

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.features.shape[0] != self.sample_ids.size:
            raise InvalidInputError("feature rows and sample ids disagree")
        if not np.isfinite(self.features).all():
            raise InvalidInputError("visual features contain non-finite values")


@dataclass
class TextFeatureSet:
    """One unit-norm anchor row per class."""

    class_features: np.ndarray  # C x d, float32
    class_names: list[str]
    text_projection_hash: str = ""

    def __post_init__(self):
        self.class_features = np.asarray(self.class_features, dtype=np.float32)
        if self.class_features.shape[0] != len(self.class_names):
            raise InvalidInputError("one feature row per class name required")
        for a in range(len(self.class_names)):
            for b in range(a + 1, len(self.class_names)):
                if (self.class_features[a] == self.class_features[b]).all():
                    raise InvalidInputError(
                        f"classes {a} and {b} received identical anchors")


def encode_latent(image, cfg: FeatureExtractionConfig,
                  provider: FeatureProvider) -> np.ndarray:
    """Scaled encoder latent of one image: gamma * encoder(image)."""
    image = np.asarray(image, dtype=np.float64)
    if not np.isfinite(image).all():
        raise InvalidInputError("image contains non-finite pixels")
    return cfg.gamma * provider.encode_latent(image)


def fit_projection(raw_features, d: int) -> Projection:
    """PCA fit: top-d orthonormal directions of the mean-centered rows.

    Args:
        raw_features: N x D matrix, N > d rows, D >= d columns.
        d: output dimensionality.

    Raises:
        InvalidInputError: too few rows or columns.
        ReducedRankError: matrix rank below d; carries the achievable rank.
    """
    raw = np.asarray(raw_features, dtype=np.float64)
    if raw.ndim != 2:
        raise InvalidInputError("raw_features must be a 2-D matrix")
    n, dim = raw.shape
    if n <= d:
        raise InvalidInputError(f"need more than d={d} rows to fit, got {n}")
    if dim < d:
        raise InvalidInputError(f"cannot project {dim} dims up to {d}")
    mean = raw.mean(axis=0)
    centered = raw - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = s[0] * max(n, dim) * np.finfo(np.float64).eps if s.size else 0.0
    rank = int((s > tol).sum())
    if rank < d:
        raise ReducedRankError(
            f"data rank {rank} is below the requested {d} dimensions",
            achievable=rank)
    components = vt[:d].copy()
    # Sign convention: largest-magnitude entry of each row is positive.
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    var = s ** 2 / (n - 1)
    return Projection(components=components, mean=mean,
                      explained_variance=var[:d],
                      total_variance=float(var.sum()))


def pool_feature_maps(maps: dict[str, np.ndarray], layer_ids) -> np.ndarray:
    """Global average pool each hooked map over space, concatenated in layer order."""
    pooled = []
    for lid in layer_ids:
        arr = np.asarray(maps[lid], dtype=np.float64)
        if arr.ndim != 3:
            raise InvalidInputError(f"layer {lid!r} map must be (C, h, w)")
        pooled.append(arr.mean(axis=(1, 2)))
    return np.concatenate(pooled)


def extract_visual_features(images, cfg: FeatureExtractionConfig,
                            provider: FeatureProvider,
                            sample_ids=None,
                            projection: Projection | None = None) -> VisualFeatureSet:
    """Run the full visual-anchor pipeline over a corpus.

    Per image: scaled latent -> noising at cfg.timestep -> hooked forward ->
    pooled concatenation -> projection to cfg.feature_dim. Fits the projection
    on this corpus when none is supplied.
    """
    schedule = provider.schedule()
    cfg.validate(num_timesteps=schedule.num_timesteps)
    n = len(images)
    if n == 0:
        raise InvalidInputError("empty image corpus")
    if sample_ids is None:
        sample_ids = np.arange(n, dtype=np.int64)
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    if sample_ids.size != n:
        raise InvalidInputError("one sample id per image required")
    if projection is not None:
        projection.require_fitted()

    rows = []
    for i in range(n):
        sid = int(sample_ids[i])
        latent = encode_latent(images[i], cfg, provider)
        noisy = add_noise(latent, cfg.timestep, schedule,
                          seed=derive_int_seed(cfg.seed, _TAG_DRAW, sid))
        maps = provider.unet_features(noisy, cfg.timestep, cfg.layer_ids,
                                      sample_id=sid)
        rows.append(pool_feature_maps(maps, cfg.layer_ids))
    raw = np.vstack(rows)
    if raw.shape[1] < cfg.feature_dim:
        raise ConfigError(
            f"selected layers pool to {raw.shape[1]} dims, below feature_dim="
            f"{cfg.feature_dim}")

    if projection is None:
        projection = fit_projection(raw, cfg.feature_dim)
    features = projection.apply(raw).astype(np.float32)
    manifest = {
        "provider": provider.provider_id,
        "config_hash": cfg.content_hash(),
        "feature_dim": cfg.feature_dim,
        "timestep": cfg.timestep,
        "layer_ids": list(cfg.layer_ids),
        "projection_hash": projection.content_hash(),
        "schedule_hash": schedule.content_hash(),
    }
    resize = getattr(provider, "resize_applied", None)
    if resize is not None:
        manifest["resize"] = list(resize)
    return VisualFeatureSet(features=features, sample_ids=sample_ids,
                            manifest=manifest, projection=projection)


def text_projection_matrix(text_dim: int, d: int, seed: int) -> np.ndarray:
    """Fixed seeded Gaussian map with orthonormalized rows, d x text_dim."""
    if text_dim < d:
        raise ConfigError(f"text dimension {text_dim} is below feature_dim {d}")
    gauss = rng(seed, _TAG_TEXT_PROJ).standard_normal((text_dim, d))
    q = np.linalg.qr(gauss)[0]  # text_dim x d, orthonormal columns
    return q.T


def encode_class_prompts(class_names: list[str], cfg: FeatureExtractionConfig,
                         provider: FeatureProvider) -> TextFeatureSet:
    """Embed one formatted prompt per class and map it to d dims.

    Rows are L2-normalized after projection so cosine scoring is a plain dot
    product downstream.
    """
    if not class_names:
        raise InvalidInputError("class_names must be non-empty")
    if len(set(class_names)) != len(class_names):
        raise InvalidInputError("class names must be pairwise distinct")
    cfg.validate()
    proj = text_projection_matrix(provider.text_dim, cfg.feature_dim, cfg.seed)
    rows = []
    for name in class_names:
        embedded = provider.text_embed(cfg.prompt_template.format(name=name))
        z = proj @ np.asarray(embedded, dtype=np.float64)
        rows.append(z / np.linalg.norm(z))
    proj_hash = hashlib.sha256(proj.astype("<f8").tobytes()).hexdigest()
    return TextFeatureSet(class_features=np.vstack(rows).astype(np.float32),
                          class_names=list(class_names),
                          text_projection_hash=proj_hash)
