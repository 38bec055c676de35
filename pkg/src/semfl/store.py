"""Persisted anchor store: manifest plus raw little-endian float32 arrays."""

from __future__ import annotations

import datetime
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError, InvalidInputError
from .extraction import Projection, TextFeatureSet, VisualFeatureSet

MANIFEST_NAME = "manifest.json"
VISUAL_NAME = "visual.f32"
TEXT_NAME = "text.f32"
PROJECTION_NAME = "projection.npz"

_REQUIRED_KEYS = ("provider", "config_hash", "feature_dim", "timestep",
                  "layer_ids", "projection_hash", "schedule_hash",
                  "sample_ids", "class_names", "visual_sha256", "text_sha256")


@dataclass
class FeatureStore:
    """A visual set and a text set sharing one feature dimension."""

    visual: VisualFeatureSet
    text: TextFeatureSet

    @property
    def feature_dim(self) -> int:
        return int(self.visual.features.shape[1])


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_store(visual: VisualFeatureSet, text: TextFeatureSet,
               path: str | Path) -> Path:
    """Write a store directory; returns its path.

    Layout: manifest.json with provenance, integrity hashes, sample ids and
    class names; visual.f32 and text.f32 as row-major little-endian float32;
    projection.npz with the fitted reduction.
    """
    if visual.features.shape[1] != text.class_features.shape[1]:
        raise InvalidInputError(
            f"visual d={visual.features.shape[1]} differs from text "
            f"d={text.class_features.shape[1]}")
    if len(np.unique(visual.sample_ids)) != visual.sample_ids.size:
        raise InvalidInputError("duplicate sample ids in visual set")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)

    visual_bytes = np.ascontiguousarray(visual.features, dtype="<f4").tobytes()
    text_bytes = np.ascontiguousarray(text.class_features, dtype="<f4").tobytes()
    (out / VISUAL_NAME).write_bytes(visual_bytes)
    (out / TEXT_NAME).write_bytes(text_bytes)
    proj = visual.projection
    proj.require_fitted()
    np.savez(out / PROJECTION_NAME, components=proj.components, mean=proj.mean,
             explained_variance=proj.explained_variance,
             total_variance=np.float64(proj.total_variance))

    manifest = dict(visual.manifest)
    manifest.update({
        "num_samples": int(visual.features.shape[0]),
        "num_classes": int(text.class_features.shape[0]),
        "sample_ids": visual.sample_ids.tolist(),
        "class_names": list(text.class_names),
        "text_projection_hash": text.text_projection_hash,
        "visual_sha256": _sha256(visual_bytes),
        "text_sha256": _sha256(text_bytes),
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    })
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return out


def load_store(path: str | Path,
               expected_config_hash: str | None = None) -> FeatureStore:
    """Read a store directory back, verifying sizes and content hashes."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"no {MANIFEST_NAME} under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    for key in _REQUIRED_KEYS:
        if key not in manifest:
            raise FormatError(f"manifest missing key {key!r}")
    if expected_config_hash is not None and manifest["config_hash"] != expected_config_hash:
        raise IntegrityError("store was extracted under a different config")

    d = int(manifest["feature_dim"])
    n = int(manifest["num_samples"])
    c = int(manifest["num_classes"])
    visual_bytes = (root / VISUAL_NAME).read_bytes()
    text_bytes = (root / TEXT_NAME).read_bytes()
    if len(visual_bytes) != n * d * 4:
        raise FormatError(f"{VISUAL_NAME} holds {len(visual_bytes)} bytes, "
                          f"expected {n * d * 4}")
    if len(text_bytes) != c * d * 4:
        raise FormatError(f"{TEXT_NAME} holds {len(text_bytes)} bytes, "
                          f"expected {c * d * 4}")
    if _sha256(visual_bytes) != manifest["visual_sha256"]:
        raise IntegrityError("visual array does not match its manifest hash")
    if _sha256(text_bytes) != manifest["text_sha256"]:
        raise IntegrityError("text array does not match its manifest hash")

    with np.load(root / PROJECTION_NAME) as arrays:
        projection = Projection(
            components=arrays["components"].copy(),
            mean=arrays["mean"].copy(),
            explained_variance=arrays["explained_variance"].copy(),
            total_variance=float(arrays["total_variance"]))
    if projection.content_hash() != manifest["projection_hash"]:
        raise IntegrityError("projection does not match its manifest hash")

    visual = VisualFeatureSet(
        features=np.frombuffer(visual_bytes, dtype="<f4").reshape(n, d).copy(),
        sample_ids=np.asarray(manifest["sample_ids"], dtype=np.int64),
        manifest={k: manifest[k] for k in ("provider", "config_hash",
                                           "feature_dim", "timestep",
                                           "layer_ids", "projection_hash",
                                           "schedule_hash")},
        projection=projection)
    if "resize" in manifest:
        visual.manifest["resize"] = manifest["resize"]
    text = TextFeatureSet(
        class_features=np.frombuffer(text_bytes, dtype="<f4").reshape(c, d).copy(),
        class_names=list(manifest["class_names"]),
        text_projection_hash=manifest["text_projection_hash"])
    return FeatureStore(visual=visual, text=text)


def slice_store(store: FeatureStore, client_indices) -> FeatureStore:
    """Rows for one client's sample ids, plus the full text set."""
    wanted = np.asarray(client_indices, dtype=np.int64)
    lookup = {int(sid): row for row, sid in enumerate(store.visual.sample_ids)}
    rows = np.empty(wanted.size, dtype=np.int64)
    for j, sid in enumerate(wanted):
        if int(sid) not in lookup:
            raise InvalidInputError(f"sample id {int(sid)} is not in the store")
        rows[j] = lookup[int(sid)]
    visual = VisualFeatureSet(features=store.visual.features[rows].copy(),
                              sample_ids=wanted.copy(),
                              manifest=dict(store.visual.manifest),
                              projection=store.visual.projection)
    return FeatureStore(visual=visual, text=store.text)
