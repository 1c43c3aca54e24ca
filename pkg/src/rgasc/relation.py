"""Prior scene-event relation matrix and the two cross-inference maps."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RSEM_MAGIC = b"RSEM"
RSEM_VERSION = 1
_RSEM_HEADER = struct.Struct("<4sIII")
NORMALIZATION_TOLERANCE = 1e-5


@dataclass
class RelationMatrix:
    values: np.ndarray  # scenes x events, float32, frozen
    scene_names: tuple = ()
    event_names: tuple = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError("relation matrix must be 2-D (scenes x events)")
        if not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > 1:
            raise ValueError("relation matrix entries must be finite and within [0, 1]")
        values.setflags(write=False)
        self.values = values
        k, e = values.shape
        self.scene_names = tuple(self.scene_names) or tuple(f"scene_{j}" for j in range(k))
        self.event_names = tuple(self.event_names) or tuple(f"event_{n}" for n in range(e))
        if len(self.scene_names) != k or len(self.event_names) != e:
            raise ValueError("vocabulary sizes do not match the matrix shape")

    @property
    def shape(self):
        return self.values.shape


def build_relation_matrix(train, k: int, e: int, scene_names=(), event_names=()) -> RelationMatrix:
    """Row ``j`` is the mean pseudo-label vector of the training clips of scene ``j``.

    Accumulates in float64 in ascending clip_id order so the result does not
    depend on how the examples were gathered.
    """
    sums = np.zeros((k, e), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    for ex in sorted(train, key=lambda x: x.clip_id):
        probs = np.asarray(ex.event_probs, dtype=np.float64)
        if probs.shape != (e,):
            raise ValueError(f"{ex.clip_id}: expected {e} event probabilities, got {probs.size}")
        if not 0 <= ex.scene_index < k:
            raise ValueError(f"{ex.clip_id}: scene index {ex.scene_index} outside [0, {k})")
        sums[ex.scene_index] += probs
        counts[ex.scene_index] += 1
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        names = [scene_names[j] if scene_names else str(j) for j in empty]
        raise ValueError(f"scene(s) {', '.join(names)} have no training clips")
    return RelationMatrix(sums / counts[:, None], scene_names, event_names)


def infer_event_from_scene(scene_pred, relation: RelationMatrix) -> np.ndarray:
    """Map a scene distribution (or a batch of them) into event space: ``p @ relation``."""
    p = np.asarray(scene_pred, dtype=np.float64)
    k = relation.shape[0]
    if p.shape[-1] != k:
        raise ValueError(f"scene prediction has length {p.shape[-1]}, expected {k}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > NORMALIZATION_TOLERANCE):
        raise ValueError("scene prediction must be a probability distribution")
    return p @ relation.values.astype(np.float64)


def infer_scene_from_event(event_pred, relation: RelationMatrix) -> np.ndarray:
    """Similarity of event predictions to each scene profile: ``q @ relation.T``. Not a distribution."""
    q = np.asarray(event_pred, dtype=np.float64)
    e = relation.shape[1]
    if q.shape[-1] != e:
        raise ValueError(f"event prediction has length {q.shape[-1]}, expected {e}")
    if np.any(q < 0) or np.any(q > 1):
        raise ValueError("event predictions must lie within [0, 1]")
    return q @ relation.values.astype(np.float64).T


def vocabulary_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".vocab.json")


def save_relation(path, relation: RelationMatrix) -> None:
    k, e = relation.shape
    with open(path, "wb") as fh:
        fh.write(_RSEM_HEADER.pack(RSEM_MAGIC, RSEM_VERSION, k, e))
        fh.write(np.ascontiguousarray(relation.values, dtype="<f4").tobytes())
    vocabulary_path(path).write_text(json.dumps(
        {"scenes": list(relation.scene_names), "events": list(relation.event_names)}, indent=2) + "\n")


def load_relation(path) -> RelationMatrix:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _RSEM_HEADER.size:
        raise ValueError(f"{path}: file too short for a relation header")
    magic, version, k, e = _RSEM_HEADER.unpack_from(blob)
    if magic != RSEM_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != RSEM_VERSION:
        raise ValueError(f"{path}: unsupported relation version {version}")
    if len(blob) != _RSEM_HEADER.size + 4 * k * e:
        raise ValueError(f"{path}: size does not match a {k}x{e} matrix")
    values = np.frombuffer(blob, dtype="<f4", offset=_RSEM_HEADER.size).reshape(k, e)
    scenes, events = (), ()
    vocab = vocabulary_path(path)
    if vocab.exists():
        names = json.loads(vocab.read_text())
        scenes, events = names["scenes"], names["events"]
    return RelationMatrix(values, scenes, events)
