"""Datasets: a generated class-template corpus and the standard archives.

Images flow through the package as N x H x W x 3 float32 arrays in [0, 1].
The synthetic corpus needs no download and is the default for desk-scale
work; the archive loaders cache under a directory and verify checksums via
the torchvision download utilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ProviderError
from .partition import _largest_remainder_counts
from .seeding import rng

DATASETS = ("synthetic", "cifar10", "cifar100", "tinyimagenet")

_TAG_TEMPLATES = 601
_TAG_SAMPLES = 602
_TAG_SUBSET = 603
_TAG_TEST = 604

_TINY_IMAGENET_URL = "http://cs231n.stanford.edu/tiny-imagenet-200.zip"
_TINY_IMAGENET_MD5 = "90528d7ca1a48142e341f4ef8d21d0de"


@dataclass
class LabeledImages:
    """An image array with labels and class names."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.size:
            raise InvalidInputError("one label per image required")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def _upsample(coarse: np.ndarray, image_size: int) -> np.ndarray:
    reps = image_size // coarse.shape[1]
    return np.repeat(np.repeat(coarse, reps, axis=1), reps, axis=2)


def _class_templates(num_classes: int, image_size: int, seed: int,
                     signal: float, detail: float) -> np.ndarray:
    """Per-class color layouts built from shared twin bases.

    Classes 2k and 2k+1 share a coarse base layout (amplitude `signal`) and
    differ only in a finer per-class pattern (amplitude `detail`), so
    telling twins apart is strictly harder than telling pairs apart. That
    makes the corpus sensitive to label-skewed training: a shard that never
    sees one twin quickly blurs the distinction.
    """
    gen = rng(seed, _TAG_TEMPLATES)
    num_pairs = (num_classes + 1) // 2
    base = _upsample(gen.random((num_pairs, 4, 4, 3)), image_size)
    fine = _upsample(gen.random((num_classes, 8, 8, 3)), image_size)
    pair = np.arange(num_classes) // 2
    return (0.5 + signal * (base[pair] - 0.5)
            + detail * (fine - 0.5)).astype(np.float64)


def _render_split(templates: np.ndarray, count: int, seed: int, tag: int,
                  noise: float, jitter: float) -> tuple[np.ndarray, np.ndarray]:
    num_classes = templates.shape[0]
    size = templates.shape[1]
    gen = rng(seed, tag)
    labels = gen.permutation(np.arange(count) % num_classes)
    images = np.empty((count, size, size, 3), dtype=np.float32)
    for i, y in enumerate(labels):
        brightness = jitter * (gen.random() - 0.5)
        contrast = 1.0 + jitter * (gen.random() - 0.5)
        img = (templates[y] - 0.5) * contrast + 0.5 + brightness
        img += noise * gen.standard_normal((size, size, 3))
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels


def synthetic_dataset(train_samples: int, test_samples: int,
                      num_classes: int = 10, image_size: int = 32,
                      seed: int = 0, noise: float = 0.18,
                      jitter: float = 0.5, signal: float = 0.7,
                      detail: float = 0.15) -> tuple[LabeledImages, LabeledImages]:
    """Generated corpus: jittered noisy renderings of per-class templates."""
    if train_samples < num_classes or test_samples < 1:
        raise InvalidInputError("need at least one training sample per class")
    if image_size % 8:
        raise InvalidInputError("image_size must be a multiple of 8")
    if not 0 <= signal <= 1 or not 0 <= detail <= 1:
        raise InvalidInputError("signal and detail must lie in [0, 1]")
    templates = _class_templates(num_classes, image_size, seed, signal, detail)
    names = [f"class_{c}" for c in range(num_classes)]
    train = LabeledImages(*_render_split(templates, train_samples, seed,
                                         _TAG_SAMPLES, noise, jitter), names)
    test = LabeledImages(*_render_split(templates, test_samples, seed,
                                        _TAG_TEST, noise, jitter), names)
    return train, test


def stratified_subset(data: LabeledImages, limit: int,
                      seed: int) -> LabeledImages:
    """Seeded subset of ``limit`` samples, classes kept proportional."""
    n = data.labels.size
    if limit >= n:
        return data
    if limit < 1:
        raise InvalidInputError("subset limit must be positive")
    counts = np.bincount(data.labels, minlength=data.num_classes)
    take = _largest_remainder_counts(counts / counts.sum(), limit)
    gen = rng(seed, _TAG_SUBSET)
    picked = []
    for c in range(data.num_classes):
        pool = np.flatnonzero(data.labels == c)
        picked.append(gen.choice(pool, size=min(int(take[c]), pool.size),
                                 replace=False))
    keep = np.sort(np.concatenate(picked))
    return LabeledImages(data.images[keep], data.labels[keep],
                         data.class_names)


def _load_cifar(name: str, cache_dir: str | Path, download: bool):
    from torchvision import datasets as tvd
    cls = tvd.CIFAR10 if name == "cifar10" else tvd.CIFAR100
    root = str(Path(cache_dir).expanduser())
    try:
        train = cls(root=root, train=True, download=download)
        test = cls(root=root, train=False, download=download)
    except Exception as exc:
        raise ProviderError(
            f"{name} archive unavailable under {root}: {exc}; place the "
            f"archive there or allow the download") from exc
    train_set = LabeledImages(np.asarray(train.data, dtype=np.float32) / 255.0,
                              np.asarray(train.targets), list(train.classes))
    test_set = LabeledImages(np.asarray(test.data, dtype=np.float32) / 255.0,
                             np.asarray(test.targets), list(test.classes))
    return train_set, test_set


def _load_tiny_imagenet(cache_dir: str | Path, download: bool):
    from PIL import Image
    root = Path(cache_dir).expanduser()
    base = root / "tiny-imagenet-200"
    if not base.is_dir():
        if not download:
            raise ProviderError(f"tinyimagenet archive missing under {root}")
        try:
            from torchvision.datasets.utils import download_and_extract_archive
            download_and_extract_archive(_TINY_IMAGENET_URL, str(root),
                                         md5=_TINY_IMAGENET_MD5)
        except Exception as exc:
            raise ProviderError(
                f"tinyimagenet archive unavailable: {exc}") from exc

    wnids = (base / "wnids.txt").read_text().split()
    words = {}
    for line in (base / "words.txt").read_text().splitlines():
        wnid, _, name = line.partition("\t")
        words[wnid] = name.split(",")[0].strip()
    names = [words.get(w, w) for w in wnids]
    index = {w: i for i, w in enumerate(wnids)}

    def read(path: Path) -> np.ndarray:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0

    train_images, train_labels = [], []
    for wnid in wnids:
        for path in sorted((base / "train" / wnid / "images").glob("*.JPEG")):
            train_images.append(read(path))
            train_labels.append(index[wnid])
    val_images, val_labels = [], []
    for line in (base / "val" / "val_annotations.txt").read_text().splitlines():
        parts = line.split("\t")
        val_images.append(read(base / "val" / "images" / parts[0]))
        val_labels.append(index[parts[1]])
    return (LabeledImages(np.stack(train_images), train_labels, names),
            LabeledImages(np.stack(val_images), val_labels, names))


def load_dataset(name: str, cache_dir: str | Path = "~/.cache/semfl",
                 train_samples: int | None = None,
                 test_samples: int | None = None, num_classes: int = 10,
                 image_size: int = 32, seed: int = 0, noise: float = 0.18,
                 jitter: float = 0.5, signal: float = 0.7,
                 detail: float = 0.15,
                 download: bool = True) -> tuple[LabeledImages, LabeledImages]:
    """Load a named dataset, optionally trimmed to seeded stratified subsets."""
    if name not in DATASETS:
        raise InvalidInputError(f"unknown dataset {name!r}; "
                                f"expected one of {DATASETS}")
    if name == "synthetic":
        return synthetic_dataset(train_samples or 5000, test_samples or 1000,
                                 num_classes=num_classes,
                                 image_size=image_size, seed=seed,
                                 noise=noise, jitter=jitter, signal=signal,
                                 detail=detail)
    if name in ("cifar10", "cifar100"):
        train, test = _load_cifar(name, cache_dir, download)
    else:
        train, test = _load_tiny_imagenet(cache_dir, download)
    if train_samples is not None:
        train = stratified_subset(train, train_samples, seed)
    if test_samples is not None:
        test = stratified_subset(test, test_samples, seed)
    return train, test
