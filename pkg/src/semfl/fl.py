"""Federated orchestration: sampling, local training, weighted averaging.

One process simulates all clients. Every client draws its own RNG stream from
(seed, round, client id), so results never depend on the order clients run
in, and an interrupted run resumed from a checkpoint matches the
uninterrupted one exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidInputError, StateError, TrainingDivergedError
from .losses import (LossBreakdown, LossWeights, cross_entropy, prox_term,
                     total_loss)
from .models import (BackboneSpec, build_model, flatten_params, forward,
                     images_to_batch, load_checkpoint, save_checkpoint,
                     unflatten_params)
from .partition import PartitionMap
from .seeding import rng
from .store import FeatureStore, slice_store

ALGORITHMS = ("semanticfl", "fedavg", "fedprox")

_TAG_SELECT = 501
_TAG_CLIENT = 502


@dataclass(frozen=True)
class RoundConfig:
    """Per-round training knobs shared by every client."""

    clients_per_round: int = 5
    local_epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float = 1e-5
    algorithm: str = "semanticfl"
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    lr_decay: float = 1.0  # optional per-round decay; 1.0 keeps lr constant

    def validate(self) -> None:
        if self.clients_per_round < 1:
            raise InvalidInputError("clients_per_round must be positive")
        if self.local_epochs < 1:
            raise InvalidInputError("local_epochs must be positive")
        if self.lr <= 0:
            raise InvalidInputError("lr must be positive")
        if not (0 <= self.momentum < 1):
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be positive")
        if self.weight_decay < 0:
            raise InvalidInputError("weight_decay must be non-negative")
        if self.algorithm not in ALGORITHMS:
            raise InvalidInputError(f"unknown algorithm {self.algorithm!r}; "
                                    f"expected one of {ALGORITHMS}")
        if not (0 < self.lr_decay <= 1):
            raise InvalidInputError("lr_decay must lie in (0, 1]")
        self.weights.validate()


@dataclass
class ClientUpdate:
    """One client's trained parameters and telemetry."""

    client_id: int
    params: np.ndarray
    num_samples: int
    loss_trace: list[LossBreakdown]

    def __post_init__(self):
        if self.num_samples < 1:
            raise InvalidInputError("client update needs at least one sample")
        if not np.isfinite(self.params).all():
            raise InvalidInputError("client update carries non-finite parameters")


@dataclass
class GlobalState:
    """Server-side view: current round, parameter vector, round summaries."""

    params: np.ndarray
    round: int = 0
    history: list = field(default_factory=list)


@dataclass
class MetricsRecord:
    """One row of round telemetry.

    Loss means are taken over the participating clients' final local epoch.
    """

    round: int
    test_acc: float
    mean_ce: float
    mean_kd: float
    mean_con: float
    clients: list[int]
    wall_time_s: float


def select_clients(num_clients: int, clients_per_round: int, round_idx: int,
                   seed: int) -> np.ndarray:
    """Uniform sample without replacement, deterministic in (seed, round)."""
    if not (1 <= clients_per_round <= num_clients):
        raise InvalidInputError(
            f"clients_per_round={clients_per_round} outside [1, {num_clients}]")
    gen = rng(seed, _TAG_SELECT, round_idx)
    picked = gen.choice(num_clients, size=clients_per_round, replace=False)
    return np.sort(picked.astype(np.int64))


def _batch_loss(algorithm: str, model, x, labels, visual, text,
                weights: LossWeights, reference) -> LossBreakdown:
    outputs = forward(model, x)
    if algorithm == "semanticfl":
        return total_loss(outputs, visual, text, labels, weights)
    ce = cross_entropy(outputs.logits, labels)
    total = ce
    if algorithm == "fedprox" and weights.mu_prox != 0.0:
        local = torch.cat([p.reshape(-1) for p in model.parameters()])
        total = total + prox_term(local, reference, weights.mu_prox)
    return LossBreakdown(ce=ce, kd=0.0, con=0.0, total=total)


def local_train(global_params: np.ndarray, spec: BackboneSpec, images, labels,
                anchors: FeatureStore | None, config: RoundConfig,
                client_id: int, round_idx: int) -> ClientUpdate:
    """Train one client from the broadcast parameters.

    Runs ``local_epochs`` of seeded mini-batch SGD on the algorithm's
    objective and returns the final parameters with per-epoch loss means.
    """
    config.validate()
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n < 1:
        raise InvalidInputError("client has no samples")
    if config.algorithm == "semanticfl":
        if anchors is None:
            raise StateError("semanticfl needs the client's anchor slice")
        if anchors.visual.features.shape[0] != n:
            raise StateError(
                f"anchor slice covers {anchors.visual.features.shape[0]} samples, "
                f"client has {n}")

    model = build_model(spec)
    unflatten_params(model, global_params)
    model.train()
    lr = config.lr * config.lr_decay ** max(round_idx - 1, 0)
    optimizer = torch.optim.SGD(model.parameters(), lr=lr,
                                momentum=config.momentum,
                                weight_decay=config.weight_decay)
    reference = None
    if config.algorithm == "fedprox" and config.weights.mu_prox != 0.0:
        reference = torch.cat([p.detach().reshape(-1).clone()
                               for p in model.parameters()])

    images = np.asarray(images, dtype=np.float32)
    text_anchor = anchors.text.class_features if anchors is not None else None
    visual_anchor = anchors.visual.features if anchors is not None else None
    gen = rng(config.seed, _TAG_CLIENT, round_idx, client_id)

    trace: list[LossBreakdown] = []
    for epoch in range(1, config.local_epochs + 1):
        order = gen.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, config.batch_size):
            take = order[start:start + config.batch_size]
            x = images_to_batch(images[take])
            visual = visual_anchor[take] if visual_anchor is not None else None
            bd = _batch_loss(config.algorithm, model, x, labels[take],
                             visual, text_anchor, config.weights, reference)
            flat = bd.as_floats()
            if not np.isfinite(flat.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}", epoch=epoch,
                    client_id=client_id, round_idx=round_idx)
            optimizer.zero_grad()
            bd.total.backward()
            optimizer.step()
            sums += np.array([flat.ce, flat.kd, flat.con, flat.total]) * take.size
        trace.append(LossBreakdown(*(sums / n)))

    return ClientUpdate(client_id=client_id, params=flatten_params(model),
                        num_samples=n, loss_trace=trace)


def fedavg_aggregate(updates: list[ClientUpdate]) -> np.ndarray:
    """Sample-count-weighted mean of the participants' parameter vectors."""
    if not updates:
        raise InvalidInputError("cannot aggregate zero updates")
    length = updates[0].params.size
    for u in updates:
        if u.params.size != length:
            raise InvalidInputError("parameter vectors differ in length")
    counts = np.array([u.num_samples for u in updates], dtype=np.float64)
    weights = counts / counts.sum()
    # Accumulate deltas against a base point: a set of identical vectors then
    # averages to exactly that vector, and clipping pins the convexity bound.
    base = updates[0].params.astype(np.float64)
    acc = np.zeros(length, dtype=np.float64)
    for w, u in zip(weights, updates):
        acc += w * (u.params.astype(np.float64) - base)
    result = base + acc
    stacked = np.stack([u.params for u in updates])
    return np.clip(result, stacked.min(axis=0), stacked.max(axis=0))


def evaluate(params: np.ndarray, spec: BackboneSpec, images, labels,
             batch_size: int = 256) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InvalidInputError("test set is empty")
    model = build_model(spec)
    unflatten_params(model, params)
    model.eval()
    images = np.asarray(images, dtype=np.float32)
    hits = 0
    with torch.no_grad():
        for start in range(0, labels.size, batch_size):
            x = images_to_batch(images[start:start + batch_size])
            logits = model(x).logits.numpy()
            hits += int((np.argmax(logits, axis=1) ==
                         labels[start:start + batch_size]).sum())
    return hits / labels.size


def _checkpoint_path(run_dir: Path, round_idx: int) -> Path:
    return run_dir / "checkpoints" / f"round_{round_idx:05d}.npz"


def _latest_checkpoint(run_dir: Path, upto: int) -> Path | None:
    folder = run_dir / "checkpoints"
    if not folder.is_dir():
        return None
    best = None
    for path in sorted(folder.glob("round_*.npz")):
        idx = int(path.stem.split("_")[1])
        if idx <= upto and (best is None or idx > best[0]):
            best = (idx, path)
    return best[1] if best else None


def run_rounds(state: GlobalState, spec: BackboneSpec, pmap: PartitionMap,
               store: FeatureStore | None, train_images, train_labels,
               test_images, test_labels, config: RoundConfig, rounds: int,
               run_dir: str | Path | None = None,
               config_hash: str = "") -> tuple[GlobalState, list[MetricsRecord]]:
    """Drive the federation for ``rounds`` rounds from the given state.

    Per round: sample participants, broadcast parameters plus anchor slices,
    train each locally, aggregate, evaluate on the held-out set. With a run
    directory, every round is checkpointed and a later call resumes from the
    newest checkpoint, reproducing the uninterrupted run exactly.
    """
    config.validate()
    if rounds < 0:
        raise InvalidInputError("rounds must be non-negative")
    num_clients = pmap.num_clients
    if config.clients_per_round > num_clients:
        raise InvalidInputError(
            f"clients_per_round={config.clients_per_round} exceeds {num_clients} clients")
    train_labels = np.asarray(train_labels, dtype=np.int64)
    metrics: list[MetricsRecord] = list(state.history)

    if run_dir is not None:
        run_dir = Path(run_dir)
        resume_from = _latest_checkpoint(run_dir, rounds)
        if resume_from is not None:
            ck_spec, params, extra = load_checkpoint(resume_from)
            if ck_spec != spec:
                raise StateError("checkpoint was written for a different model spec")
            state = GlobalState(params=params, round=int(extra["round"]),
                                history=[MetricsRecord(**row)
                                         for row in extra.get("metrics", [])])
            metrics = list(state.history)

    for round_idx in range(state.round + 1, rounds + 1):
        started = time.perf_counter()
        picked = select_clients(num_clients, config.clients_per_round,
                                round_idx, config.seed)
        updates = []
        for k in picked:
            idx = pmap.client_indices[int(k)]
            anchors = None
            if config.algorithm == "semanticfl":
                if store is None:
                    raise StateError("semanticfl needs a feature store")
                anchors = slice_store(store, idx)
            updates.append(local_train(state.params, spec,
                                       np.asarray(train_images)[idx],
                                       train_labels[idx], anchors, config,
                                       client_id=int(k), round_idx=round_idx))
        new_params = fedavg_aggregate(updates)
        if new_params.size != state.params.size:
            raise StateError("parameter length changed across rounds")
        acc = evaluate(new_params, spec, test_images, test_labels)
        last = [u.loss_trace[-1] for u in updates]
        record = MetricsRecord(
            round=round_idx, test_acc=acc,
            mean_ce=float(np.mean([b.ce for b in last])),
            mean_kd=float(np.mean([b.kd for b in last])),
            mean_con=float(np.mean([b.con for b in last])),
            clients=[int(k) for k in picked],
            wall_time_s=time.perf_counter() - started)
        metrics.append(record)
        state = GlobalState(params=new_params, round=round_idx, history=metrics)
        if run_dir is not None:
            _checkpoint_path(run_dir, round_idx).parent.mkdir(parents=True,
                                                              exist_ok=True)
            save_checkpoint(_checkpoint_path(run_dir, round_idx), spec,
                            new_params,
                            extra={"round": round_idx,
                                   "config_hash": config_hash,
                                   "metrics": [vars(m) for m in metrics]})
            (run_dir / "orchestration.json").write_text(json.dumps(
                {"round": round_idx, "seed": config.seed,
                 "config_hash": config_hash}, indent=1))

    return state, metrics
