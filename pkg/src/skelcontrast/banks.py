"""Cross-batch memory banks for graph embeddings.

InstanceBank keeps, per class, a FIFO ring of up to P recent embeddings;
SemanticBank keeps one momentum-averaged prototype per class. Entries are
stored L2-normalized and as plain detached arrays: nothing in a bank carries
gradient back into the step that produced it. Module-level op counters exist
so the evaluation path can prove it never touched a bank.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import BadConfigError, ZeroVectorError

OP_COUNTS = {"push": 0, "update": 0, "snapshot": 0}


def reset_op_counts():
    for key in OP_COUNTS:
        OP_COUNTS[key] = 0


def _normalized(v) -> np.ndarray:
    arr = np.asarray(getattr(v, "data", v), dtype=np.float64)
    if arr.ndim != 1:
        raise BadConfigError(f"embeddings must be vectors, got shape {arr.shape}")
    norm = float(np.linalg.norm(arr))
    if norm < 1e-12:
        raise ZeroVectorError("cannot normalize a (near-)zero embedding")
    return arr / norm


class InstanceBank:
    """Per-class FIFO of unit-norm embeddings with global insertion ages."""

    def __init__(self, class_count: int, capacity: int):
        if class_count < 1 or capacity < 1:
            raise BadConfigError("class_count and capacity must be >= 1")
        self.class_count = class_count
        self.capacity = capacity
        self._buffers = [deque() for _ in range(class_count)]
        self._next_age = 0

    def __len__(self):
        return sum(len(b) for b in self._buffers)

    def class_size(self, label: int) -> int:
        return len(self._buffers[label])


class SemanticBank:
    """One momentum prototype per class; classes start uninitialized."""

    def __init__(self, class_count: int, embed_dim: int):
        if class_count < 1 or embed_dim < 1:
            raise BadConfigError("class_count and embed_dim must be >= 1")
        self.class_count = class_count
        self.embed_dim = embed_dim
        self.vectors = np.zeros((class_count, embed_dim))
        self.initialized = np.zeros(class_count, dtype=bool)


def push_instance(bank: InstanceBank, v, label: int):
    """Append v/|v| to class `label`; evict the single oldest beyond P."""
    if not 0 <= label < bank.class_count:
        raise BadConfigError(f"label {label} out of range")
    OP_COUNTS["push"] += 1
    buf = bank._buffers[label]
    buf.append((bank._next_age, _normalized(v)))
    bank._next_age += 1
    if len(buf) > bank.capacity:
        buf.popleft()


def update_semantic(bank: SemanticBank, v, label: int, alpha: float):
    """EMA momentum update on the normalized embedding; the first
    sighting of a class sets the prototype directly."""
    if not 0 <= label < bank.class_count:
        raise BadConfigError(f"label {label} out of range")
    if not 0.0 < alpha < 1.0:
        raise BadConfigError(f"alpha must be in (0, 1), got {alpha}")
    OP_COUNTS["update"] += 1
    vhat = _normalized(v)
    if bank.initialized[label]:
        bank.vectors[label] = alpha * bank.vectors[label] + (1.0 - alpha) * vhat
    else:
        bank.vectors[label] = vhat
        bank.initialized[label] = True


@dataclass
class InstanceSnapshot:
    """Immutable copy: per class, (n_c, C_g) embeddings and (n_c,) ages."""

    embeddings: list
    ages: list

    @property
    def class_count(self) -> int:
        return len(self.embeddings)


@dataclass
class SemanticSnapshot:
    vectors: np.ndarray
    initialized: np.ndarray


def snapshot(bank):
    """Read-only copy of the bank's state; later pushes do not affect it."""
    OP_COUNTS["snapshot"] += 1
    if isinstance(bank, InstanceBank):
        embeddings, ages = [], []
        for buf in bank._buffers:
            if buf:
                embeddings.append(np.stack([e for _, e in buf]))
                ages.append(np.array([a for a, _ in buf], dtype=np.int64))
            else:
                embeddings.append(np.zeros((0, 0)))
                ages.append(np.zeros(0, dtype=np.int64))
        return InstanceSnapshot(embeddings, ages)
    if isinstance(bank, SemanticBank):
        return SemanticSnapshot(bank.vectors.copy(), bank.initialized.copy())
    raise BadConfigError(f"not a bank: {type(bank).__name__}")


def dump_instance_bank(bank: InstanceBank, path):
    """Debug dump: per entry, class u32, age u64, C_g float32 values."""
    with open(path, "wb") as f:
        for label, buf in enumerate(bank._buffers):
            for age, emb in buf:
                f.write(struct.pack("<IQ", label, age))
                f.write(np.asarray(emb, dtype="<f4").tobytes())


def read_bank_dump(path, embed_dim: int) -> list:
    """Inverse of dump_instance_bank: list of (class, age, float32 vector)."""
    entries = []
    rec = 12 + 4 * embed_dim
    blob = open(path, "rb").read()
    if len(blob) % rec != 0:
        raise BadConfigError("dump size is not a whole number of records")
    for off in range(0, len(blob), rec):
        label, age = struct.unpack_from("<IQ", blob, off)
        vec = np.frombuffer(blob, dtype="<f4", count=embed_dim, offset=off + 12)
        entries.append((label, age, vec.astype(np.float64)))
    return entries
