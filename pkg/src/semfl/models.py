"""Client networks: backbone plus twin heads for logits and unit-norm features.

Every architecture shares one contract: images in, (logits, L2-normalized
d-dim feature) out, with the full parameter state convertible to and from a
single flat vector for weighted averaging.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InvalidInputError

ARCHITECTURES = ("resnet10", "mobilenetv2", "tinycnn", "linear")


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture choice plus the head dimensions.

    ``feature_dim`` must match the anchor store used during training.
    """

    architecture: str
    num_classes: int
    feature_dim: int
    seed: int = 0
    input_size: int = 32
    in_channels: int = 3

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; "
                              f"expected one of {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.input_size < 8:
            raise ConfigError("input_size must be at least 8")

    def to_json(self) -> dict:
        return {"architecture": self.architecture, "num_classes": self.num_classes,
                "feature_dim": self.feature_dim, "seed": self.seed,
                "input_size": self.input_size, "in_channels": self.in_channels}

    @classmethod
    def from_json(cls, doc: dict) -> "BackboneSpec":
        spec = cls(**doc)
        spec.validate()
        return spec


@dataclass
class ModelOutput:
    """Per-batch logits (B x C) and unit-norm features (B x d)."""

    logits: torch.Tensor
    features: torch.Tensor


class _BasicBlock(nn.Module):
    """Two 3x3 convs with a skip connection, widening/striding on entry."""

    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class _ResNet10(nn.Module):
    """Four stages of one basic block each, widths 64/128/256/512."""

    out_dim = 512

    def __init__(self, in_channels: int):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 64, 3, padding=1, bias=False),
            nn.BatchNorm2d(64), nn.ReLU())
        self.stages = nn.Sequential(
            _BasicBlock(64, 64, stride=1),
            _BasicBlock(64, 128, stride=2),
            _BasicBlock(128, 256, stride=2),
            _BasicBlock(256, 512, stride=2))
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.stages(self.stem(x))).flatten(1)


class _TinyCNN(nn.Module):
    """Two small convs with aggressive pooling and one affine layer.

    Kept free of normalization layers so its gradients are exactly checkable
    against finite differences at few-thousand-parameter scale.
    """

    def __init__(self, in_channels: int, input_size: int, hidden: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 8, 3, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1)
        self.pool = nn.AvgPool2d(4)
        flat = 16 * (input_size // 16) ** 2
        if flat == 0:
            raise ConfigError(f"input_size {input_size} too small for tinycnn")
        self.fc = nn.Linear(flat, hidden)
        self.out_dim = hidden

    def forward(self, x):
        x = self.pool(torch.relu(self.conv1(x)))
        x = self.pool(torch.relu(self.conv2(x)))
        return torch.relu(self.fc(x.flatten(1)))


class _Flatten(nn.Module):
    def __init__(self, out_dim: int):
        super().__init__()
        self.out_dim = out_dim

    def forward(self, x):
        return x.flatten(1)


class _MobileNetV2(nn.Module):
    out_dim = 1280

    def __init__(self, in_channels: int):
        super().__init__()
        from torchvision.models import mobilenet_v2
        trunk = mobilenet_v2(weights=None)
        if in_channels != 3:
            raise ConfigError("mobilenetv2 backbone expects 3-channel input")
        self.features = trunk.features
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


class ClientModel(nn.Module):
    """Backbone feeding a classifier head and an L2-normalized feature head."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        if spec.architecture == "resnet10":
            self.backbone = _ResNet10(spec.in_channels)
        elif spec.architecture == "mobilenetv2":
            self.backbone = _MobileNetV2(spec.in_channels)
        elif spec.architecture == "tinycnn":
            self.backbone = _TinyCNN(spec.in_channels, spec.input_size)
        else:
            self.backbone = _Flatten(spec.in_channels * spec.input_size ** 2)
        self.classifier = nn.Linear(self.backbone.out_dim, spec.num_classes)
        self.proj_head = nn.Linear(self.backbone.out_dim, spec.feature_dim)

    def forward(self, x: torch.Tensor) -> ModelOutput:
        h = self.backbone(x)
        raw = self.proj_head(h)
        features = raw / raw.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return ModelOutput(logits=self.classifier(h), features=features)


def build_model(spec: BackboneSpec) -> ClientModel:
    """Construct a seeded-deterministic model from ``spec``."""
    spec.validate()
    torch.manual_seed(spec.seed)
    return ClientModel(spec)


def images_to_batch(images) -> torch.Tensor:
    """Stack H x W x 3 images in [0, 1] into a B x 3 x H x W float tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] not in (1, 3):
        raise InvalidInputError(f"expected B x H x W x C images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def forward(model: ClientModel, batch) -> ModelOutput:
    """Run a batch through the model, validating shape up front."""
    if not torch.is_tensor(batch):
        batch = images_to_batch(batch)
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise InvalidInputError("batch must be a non-empty B x C x H x W tensor")
    spec = model.spec
    expected = (spec.in_channels, spec.input_size, spec.input_size)
    if tuple(batch.shape[1:]) != expected:
        raise InvalidInputError(
            f"batch shape {tuple(batch.shape[1:])} does not match model input {expected}")
    return model(batch)


def _float_items(model: ClientModel):
    # num_batches_tracked counters are integer bookkeeping, not parameters.
    for key, tensor in model.state_dict().items():
        if tensor.is_floating_point():
            yield key, tensor


def flatten_params(model: ClientModel) -> np.ndarray:
    """All float state (weights, biases, running stats) as one float64 vector."""
    parts = [t.detach().cpu().numpy().astype(np.float64).ravel()
             for _, t in _float_items(model)]
    return np.concatenate(parts)


def unflatten_params(model: ClientModel, vector: np.ndarray) -> None:
    """Write a flat vector back into the model's float state, in place."""
    vector = np.asarray(vector, dtype=np.float64)
    state = model.state_dict()
    offset = 0
    for key, tensor in _float_items(model):
        n = tensor.numel()
        if offset + n > vector.size:
            raise InvalidInputError("parameter vector too short for this model")
        chunk = vector[offset:offset + n].reshape(tuple(tensor.shape))
        state[key] = torch.from_numpy(chunk.copy()).to(tensor.dtype)
        offset += n
    if offset != vector.size:
        raise InvalidInputError(
            f"parameter vector has {vector.size} entries, model needs {offset}")
    model.load_state_dict(state)


def num_params(model: ClientModel) -> int:
    return sum(t.numel() for _, t in _float_items(model))


def save_checkpoint(path: str | Path, spec: BackboneSpec,
                    vector: np.ndarray, extra: dict | None = None) -> None:
    """Parameter vector plus spec (and optional metadata) in one npz file."""
    doc = {"spec": spec.to_json()}
    if extra:
        doc.update(extra)
    np.savez(path, params=np.asarray(vector, dtype=np.float64),
             meta=np.frombuffer(json.dumps(doc).encode(), dtype=np.uint8))


def load_checkpoint(path: str | Path) -> tuple[BackboneSpec, np.ndarray, dict]:
    with np.load(path) as arrays:
        params = arrays["params"].copy()
        doc = json.loads(bytes(arrays["meta"].tobytes()).decode())
    spec = BackboneSpec.from_json(doc.pop("spec"))
    return spec, params, doc
