"""Non-IID client partitions of a labeled dataset.

Three heterogeneity scenarios are supported, all deterministic given a seed:

* ``dirichlet`` -- label shift: each class is split across clients according
  to proportions drawn from a Dirichlet distribution with concentration
  ``alpha`` (smaller alpha, more skew).
* ``extreme`` -- label skew: every client holds samples from exactly
  ``classes_per_client`` classes, assigned round-robin over a shuffled
  class list.
* ``longtail`` -- imbalance shift: class c retains
  ``n_max * ratio**(-c / (C - 1))`` samples (exponential profile), then the
  retained samples are spread over clients with a Dirichlet split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InfeasiblePartitionError, InvalidInputError
from .seeding import rng

SCENARIOS = ("dirichlet", "extreme", "longtail")

# Stream tags keep the per-scenario RNG streams disjoint for a shared seed.
_TAG_DIRICHLET = 101
_TAG_EXTREME = 102
_TAG_LONGTAIL = 103

_MAX_REDRAWS = 50


@dataclass(frozen=True)
class PartitionSpec:
    """Parameters of a partitioning scenario.

    ``alpha`` is required for dirichlet and longtail (longtail uses it to
    spread the retained samples over clients), ``classes_per_client`` for
    extreme, ``imbalance_ratio`` for longtail.
    """

    scenario: str
    num_clients: int
    seed: int
    alpha: float | None = None
    classes_per_client: int | None = None
    imbalance_ratio: float | None = None

    def validate(self, num_classes: int | None = None) -> None:
        if self.scenario not in SCENARIOS:
            raise InvalidInputError(
                f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.num_clients < 1:
            raise InvalidInputError("num_clients must be a positive integer")
        if self.scenario == "dirichlet":
            if self.alpha is None or self.alpha <= 0:
                raise InvalidInputError("dirichlet scenario requires alpha > 0")
        elif self.scenario == "extreme":
            s = self.classes_per_client
            if s is None or s < 1:
                raise InvalidInputError("extreme scenario requires classes_per_client >= 1")
            if num_classes is not None:
                if s > num_classes:
                    raise InvalidInputError(
                        f"classes_per_client={s} exceeds number of classes {num_classes}")
                if s * self.num_clients < num_classes:
                    raise InvalidInputError(
                        "classes_per_client * num_clients must cover every class")
        elif self.scenario == "longtail":
            if self.imbalance_ratio is None or self.imbalance_ratio < 1:
                raise InvalidInputError("longtail scenario requires imbalance_ratio >= 1")
            if self.alpha is None or self.alpha <= 0:
                raise InvalidInputError(
                    "longtail scenario requires alpha > 0 for the client split")


@dataclass
class PartitionMap:
    """Assignment of sample indices to clients.

    ``client_indices[k]`` holds the dataset indices of client k; the sets are
    pairwise disjoint.  ``label_histogram`` is a K x C count matrix whose row
    k sums to ``len(client_indices[k])``.
    """

    client_indices: list[np.ndarray]
    label_histogram: np.ndarray

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    @property
    def num_classes(self) -> int:
        return self.label_histogram.shape[1]

    def sample_counts(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.client_indices], dtype=np.int64)


@dataclass
class PartitionStats:
    """Per-client summary used for logging."""

    sample_counts: np.ndarray
    label_entropy: np.ndarray
    label_support: np.ndarray
    pairwise_tv: np.ndarray


def _as_labels(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.size == 0:
        raise InvalidInputError("labels must be non-empty")
    if arr.ndim != 1:
        raise InvalidInputError("labels must be one-dimensional")
    arr = arr.astype(np.int64, copy=False)
    if arr.min() < 0:
        raise InvalidInputError("labels must be non-negative class ids")
    return arr


def _class_index_lists(labels: np.ndarray) -> list[np.ndarray]:
    num_classes = int(labels.max()) + 1
    per_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    for c, ix in enumerate(per_class):
        if len(ix) == 0:
            raise InvalidInputError(f"class {c} has no samples")
    return per_class


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing exactly to `total`, rounded by largest remainder."""
    target = proportions * total
    counts = np.floor(target).astype(np.int64)
    remainder = total - int(counts.sum())
    if remainder > 0:
        # Stable sort keeps ties deterministic (lower index first).
        order = np.argsort(-(target - counts), kind="stable")
        for j in range(remainder):
            counts[order[j % len(counts)]] += 1
    return counts


def _histogram(client_indices: list[np.ndarray], labels: np.ndarray,
               num_classes: int) -> np.ndarray:
    hist = np.zeros((len(client_indices), num_classes), dtype=np.int64)
    for k, ix in enumerate(client_indices):
        if len(ix):
            hist[k] = np.bincount(labels[ix], minlength=num_classes)
    return hist


def dirichlet_partition(labels, spec: PartitionSpec) -> PartitionMap:
    """Split samples of each class across clients with Dirichlet(alpha) proportions.

    Every client is guaranteed at least one sample: if a draw leaves a client
    empty the proportions are redrawn (up to 50 times), after which one sample
    is moved from the largest client to each remaining empty one.
    """
    labels = _as_labels(labels)
    if spec.scenario != "dirichlet":
        raise InvalidInputError(f"spec scenario is {spec.scenario!r}, not 'dirichlet'")
    spec.validate()
    per_class = _class_index_lists(labels)
    num_classes = len(per_class)
    K = spec.num_clients
    if K > labels.size:
        raise InfeasiblePartitionError(
            f"cannot split {labels.size} samples across {K} clients")

    gen = rng(spec.seed, _TAG_DIRICHLET)
    shuffled = [gen.permutation(ix) for ix in per_class]

    client_indices: list[list[np.ndarray]] = []
    for _ in range(_MAX_REDRAWS):
        proportions = gen.dirichlet(np.full(K, float(spec.alpha)), size=num_classes)
        client_indices = [[] for _ in range(K)]
        for c, ix in enumerate(shuffled):
            counts = _largest_remainder_counts(proportions[c], len(ix))
            start = 0
            for k in range(K):
                if counts[k]:
                    client_indices[k].append(ix[start:start + counts[k]])
                start += counts[k]
        if all(chunks for chunks in client_indices):
            break

    merged = [np.sort(np.concatenate(ch)) if ch else np.empty(0, dtype=np.int64)
              for ch in client_indices]
    # Redraws exhausted: move one sample from the largest client to each empty one.
    for k in range(K):
        if len(merged[k]) == 0:
            donor = int(np.argmax([len(ix) for ix in merged]))
            merged[k] = merged[donor][:1]
            merged[donor] = merged[donor][1:]

    return PartitionMap(merged, _histogram(merged, labels, num_classes))


def extreme_partition(labels, spec: PartitionSpec) -> PartitionMap:
    """Give each client exactly `classes_per_client` classes (shard split).

    Client k takes the next ``s`` entries of a seeded circularly-shuffled
    class list, so each class lands on either floor or ceil of ``s*K/C``
    clients; a class's samples are split equally among its clients.
    """
    labels = _as_labels(labels)
    if spec.scenario != "extreme":
        raise InvalidInputError(f"spec scenario is {spec.scenario!r}, not 'extreme'")
    per_class = _class_index_lists(labels)
    num_classes = len(per_class)
    spec.validate(num_classes=num_classes)
    K, s = spec.num_clients, int(spec.classes_per_client)

    gen = rng(spec.seed, _TAG_EXTREME)
    class_order = gen.permutation(num_classes)
    assigned: list[list[int]] = [[] for _ in range(num_classes)]  # class -> clients
    for k in range(K):
        for i in range(s):
            c = int(class_order[(k * s + i) % num_classes])
            assigned[c].append(k)

    client_indices: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c, ix in enumerate(per_class):
        holders = assigned[c]
        shuffled = gen.permutation(ix)
        counts = _largest_remainder_counts(np.full(len(holders), 1.0 / len(holders)),
                                           len(ix))
        start = 0
        for k, cnt in zip(holders, counts):
            if cnt:
                client_indices[k].append(shuffled[start:start + cnt])
            start += cnt

    merged = [np.sort(np.concatenate(ch)) if ch else np.empty(0, dtype=np.int64)
              for ch in client_indices]
    return PartitionMap(merged, _histogram(merged, labels, num_classes))


def longtail_retention_counts(class_counts: np.ndarray, ratio: float) -> np.ndarray:
    """Exponential retention profile: class c keeps n_max * ratio**(-c/(C-1))."""
    num_classes = len(class_counts)
    n_max = int(class_counts.min())
    if num_classes == 1:
        return np.array([n_max], dtype=np.int64)
    exponents = -np.arange(num_classes) / (num_classes - 1)
    kept = np.rint(n_max * np.power(float(ratio), exponents)).astype(np.int64)
    return np.maximum(kept, 1)


def longtail_partition(labels, spec: PartitionSpec) -> PartitionMap:
    """Retain a long-tailed subset, then spread it over clients Dirichlet-style."""
    labels = _as_labels(labels)
    if spec.scenario != "longtail":
        raise InvalidInputError(f"spec scenario is {spec.scenario!r}, not 'longtail'")
    spec.validate()
    per_class = _class_index_lists(labels)
    class_counts = np.array([len(ix) for ix in per_class], dtype=np.int64)
    kept_counts = longtail_retention_counts(class_counts, float(spec.imbalance_ratio))

    gen = rng(spec.seed, _TAG_LONGTAIL)
    retained = np.sort(np.concatenate([
        gen.permutation(ix)[:kept] for ix, kept in zip(per_class, kept_counts)
    ]))

    inner_spec = PartitionSpec(scenario="dirichlet", num_clients=spec.num_clients,
                               seed=spec.seed, alpha=spec.alpha)
    inner = dirichlet_partition(labels[retained], inner_spec)
    client_indices = [np.sort(retained[ix]) for ix in inner.client_indices]
    return PartitionMap(client_indices,
                        _histogram(client_indices, labels, len(per_class)))


def build_partition(labels, spec: PartitionSpec) -> PartitionMap:
    """Dispatch to the scenario that ``spec`` names."""
    builders = {
        "dirichlet": dirichlet_partition,
        "extreme": extreme_partition,
        "longtail": longtail_partition,
    }
    if spec.scenario not in builders:
        raise InvalidInputError(f"unknown scenario {spec.scenario!r}")
    return builders[spec.scenario](labels, spec)


def partition_stats(pmap: PartitionMap) -> PartitionStats:
    """Per-client sample counts, label entropies and pairwise TV distances."""
    hist = pmap.label_histogram.astype(np.float64)
    counts = pmap.sample_counts()
    probs = hist / np.maximum(counts, 1)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(probs > 0, np.log(probs), 0.0)
    entropy = -(probs * logs).sum(axis=1)
    support = (pmap.label_histogram > 0).sum(axis=1)
    diff = probs[:, None, :] - probs[None, :, :]
    pairwise_tv = 0.5 * np.abs(diff).sum(axis=2)
    return PartitionStats(sample_counts=counts,
                          label_entropy=entropy,
                          label_support=support.astype(np.int64),
                          pairwise_tv=pairwise_tv)


def partition_to_json(pmap: PartitionMap, spec: PartitionSpec) -> dict:
    return {
        "scenario": spec.scenario,
        "seed": int(spec.seed),
        "clients": [ix.tolist() for ix in pmap.client_indices],
    }


def partition_from_json(doc: dict, labels) -> PartitionMap:
    labels = _as_labels(labels)
    num_classes = int(labels.max()) + 1
    client_indices = [np.asarray(ix, dtype=np.int64) for ix in doc["clients"]]
    seen = np.concatenate(client_indices) if client_indices else np.empty(0, np.int64)
    if len(np.unique(seen)) != len(seen):
        raise InvalidInputError("partition document assigns an index twice")
    if seen.size and (seen.min() < 0 or seen.max() >= labels.size):
        raise InvalidInputError("partition document references out-of-range indices")
    return PartitionMap(client_indices, _histogram(client_indices, labels, num_classes))


def save_partition(path: str | Path, pmap: PartitionMap, spec: PartitionSpec) -> None:
    Path(path).write_text(json.dumps(partition_to_json(pmap, spec), indent=1))


def load_partition(path: str | Path, labels) -> PartitionMap:
    return partition_from_json(json.loads(Path(path).read_text()), labels)
