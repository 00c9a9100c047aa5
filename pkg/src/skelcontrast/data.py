"""Skeleton sequence data model, modality streams, synthetic data, file I/O.

A sequence is a (T, N, C) array of per-joint features over T frames plus a
class label and a modality tag. Four modalities are derived from the raw
joint stream: joint coordinates, bone vectors (spatial differences along the
skeleton tree), and the temporal differences of each.

The synthetic generator encodes class identity in joint co-movement: each
class couples a driver joint's oscillation into a class-specific set of
driven joints, while the remaining joints move with sequence-random phases
that carry no class information. Class structure therefore lives in *which
joints move together*, which is exactly what an adaptive graph can pick up.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import BadConfigError, FormatError, InvalidModalityError

MODALITY_JOINT = "joint"
MODALITY_BONE = "bone"
MODALITY_JOINT_MOTION = "joint-motion"
MODALITY_BONE_MOTION = "bone-motion"
MODALITIES = (MODALITY_JOINT, MODALITY_BONE, MODALITY_JOINT_MOTION,
              MODALITY_BONE_MOTION)
_MODALITY_CODES = {m: i for i, m in enumerate(MODALITIES)}

_MAGIC = b"SKGC"
_VERSION = 1


@dataclass
class SkeletonSequence:
    """One skeleton sequence: frames (T, N, C), class label, modality tag."""

    frames: np.ndarray
    label: int
    modality: str = MODALITY_JOINT

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise BadConfigError(f"frames must be (T, N, C), got {self.frames.shape}")
        t, n, _ = self.frames.shape
        if t < 2 or n < 2:
            raise BadConfigError(f"need T >= 2 and N >= 2, got T={t}, N={n}")
        if not np.all(np.isfinite(self.frames)):
            raise BadConfigError("frames contain non-finite values")
        if self.modality not in _MODALITY_CODES:
            raise InvalidModalityError(f"unknown modality {self.modality!r}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]


class SkeletonTopology:
    """Fixed skeletal tree: parent links plus the symmetric 0/1 adjacency."""

    def __init__(self, parent):
        parent = list(int(p) for p in parent)
        n = len(parent)
        if n < 2:
            raise BadConfigError("topology needs at least 2 joints")
        roots = [j for j in range(n) if parent[j] == j]
        if len(roots) != 1:
            raise BadConfigError(f"parent links must form a single tree, got roots {roots}")
        # every joint must reach the root without cycles
        for j in range(n):
            seen, cur = set(), j
            while parent[cur] != cur:
                if cur in seen:
                    raise BadConfigError("parent links contain a cycle")
                seen.add(cur)
                cur = parent[cur]
        self.parent = parent
        self.joint_count = n
        adj = np.zeros((n, n))
        for j in range(n):
            p = parent[j]
            if p != j:
                adj[j, p] = 1.0
                adj[p, j] = 1.0
        self.adjacency = adj
        self.root = roots[0]


def default_topology(joint_count: int) -> SkeletonTopology:
    """Canonical binary-tree topology used for synthetic skeletons."""
    return SkeletonTopology([max((j - 1) // 2, 0) if j > 0 else 0
                             for j in range(joint_count)])


def rest_pose(topology: SkeletonTopology, channels: int = 3) -> np.ndarray:
    """Deterministic (N, C) joint layout: each child offset one unit from its
    parent along an axis cycling with the joint index."""
    n, c = topology.joint_count, channels
    pos = np.zeros((n, c))
    for j in range(1, n):
        direction = np.zeros(c)
        direction[j % c] = 1.0 if (j // c) % 2 == 0 else -1.0
        pos[j] = pos[topology.parent[j]] + direction
    return pos


@dataclass
class Dataset:
    sequences: list
    class_count: int
    split: str = "train"

    def __post_init__(self):
        if not self.sequences:
            raise BadConfigError("dataset must be nonempty")
        if self.class_count < 1:
            raise BadConfigError("class_count must be >= 1")
        for s in self.sequences:
            if not 0 <= s.label < self.class_count:
                raise BadConfigError(
                    f"label {s.label} out of range for {self.class_count} classes")

    def __len__(self):
        return len(self.sequences)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.intp)


# ---------------------------------------------------------------------------
# modality derivation
# ---------------------------------------------------------------------------

def derive_modality(seq: SkeletonSequence, topology: SkeletonTopology,
                    kind: str) -> SkeletonSequence:
    """Derive one of the four streams from a joint-coordinate sequence.

    bone[t, j] = joint[t, j] - joint[t, parent(j)] (root bone is zero);
    motion[t] = frames[t+1] - frames[t] with the final frame zero-padded so
    all four streams keep the (T, N, C) shape.
    """
    if seq.modality != MODALITY_JOINT:
        raise InvalidModalityError(
            f"modalities derive from the joint stream, got {seq.modality!r}")
    if kind not in _MODALITY_CODES:
        raise InvalidModalityError(f"unknown modality {kind!r}")
    if topology.joint_count != seq.num_joints:
        raise BadConfigError(
            f"topology has {topology.joint_count} joints, sequence has {seq.num_joints}")

    def bone(frames):
        return frames - frames[:, topology.parent, :]

    def motion(frames):
        out = np.zeros_like(frames)
        out[:-1] = frames[1:] - frames[:-1]
        return out

    if kind == MODALITY_JOINT:
        out = seq.frames.copy()
    elif kind == MODALITY_BONE:
        out = bone(seq.frames)
    elif kind == MODALITY_JOINT_MOTION:
        out = motion(seq.frames)
    else:
        out = motion(bone(seq.frames))
    return SkeletonSequence(out, seq.label, kind)


def derive_dataset(dataset: Dataset, topology: SkeletonTopology,
                   kind: str) -> Dataset:
    return Dataset([derive_modality(s, topology, kind) for s in dataset.sequences],
                   dataset.class_count, dataset.split)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class _ClassPattern:
    driver: int
    driven: tuple
    couplings: np.ndarray


def _draw_patterns(rng, class_count, joints, driven_per_class):
    patterns, used = [], set()
    for _ in range(class_count):
        for _attempt in range(1000):
            driver = int(rng.integers(joints))
            others = [j for j in range(joints) if j != driver]
            driven = tuple(sorted(int(j) for j in rng.choice(
                others, size=driven_per_class, replace=False)))
            key = (driver, driven)
            if key not in used:
                used.add(key)
                break
        else:
            raise BadConfigError(
                f"cannot find {class_count} distinct motion patterns over {joints} joints")
        couplings = rng.uniform(0.7, 1.3, size=driven_per_class) \
            * rng.choice([-1.0, 1.0], size=driven_per_class)
        patterns.append(_ClassPattern(driver, driven, couplings))
    return patterns


def generate_synthetic(class_count: int, per_class: int, frames: int = 16,
                       joints: int = 8, channels: int = 3, seed: int = 0,
                       noise_scale: float = 0.1, phase_jitter: float = 0.3,
                       distractor_scale: float = 0.5, cycles: float = 2.0,
                       rest_scale: float = 0.25, split: str = "train") -> Dataset:
    """Deterministic synthetic skeleton dataset.

    Each class k has a driver joint whose oscillation is linearly copied
    (scaled by per-pair couplings) into a class-specific driven joint set;
    all other joints oscillate with fully random per-sequence phases. Driver
    phase only jitters a little, so class trajectories cluster, while the
    distractor joints add class-free variance. Gaussian noise with sigma =
    noise_scale * amplitude is added everywhere. Values are quantized to
    float32 so file round-trips are bit-exact.

    Class structure (patterns, couplings, motion directions) depends on
    ``seed`` alone; per-sequence randomness additionally folds in ``split``,
    so train/test splits with the same seed sample disjoint sequences from
    the *same* classes.
    """
    if class_count < 2:
        raise BadConfigError("need at least 2 classes")
    if per_class < 2:
        raise BadConfigError("need at least 2 sequences per class")
    if frames < 2 or joints < 2 or channels < 1:
        raise BadConfigError("frames/joints/channels must be positive (T >= 2, N >= 2)")

    base = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    structure_rng = np.random.default_rng([*base, 104729])
    rng = np.random.default_rng([*base, 104729, zlib.crc32(split.encode())])

    topology = default_topology(joints)
    rest = rest_scale * rest_pose(topology, channels)
    amplitude = 1.0

    # one motion direction per joint, shared by ALL classes: class identity
    # must come from which joints co-move, not from marginal directions
    joint_dirs = structure_rng.normal(size=(joints, channels))
    joint_dirs /= np.linalg.norm(joint_dirs, axis=1, keepdims=True)

    driven_per_class = min(2, joints - 1)
    patterns = _draw_patterns(structure_rng, class_count, joints,
                              driven_per_class)

    t_grid = np.arange(frames) / frames  # cycles are relative to clip length
    omega = 2.0 * np.pi * cycles

    sequences = []
    for label, pat in enumerate(patterns):
        moving = {pat.driver, *pat.driven}
        distractors = [j for j in range(joints) if j not in moving]
        for _ in range(per_class):
            drive_phase = phase_jitter * rng.uniform(-1.0, 1.0)
            distract_phases = rng.uniform(0.0, 2.0 * np.pi, size=len(distractors))

            motion = np.zeros((frames, joints, channels))
            wave = amplitude * np.sin(omega * t_grid + drive_phase)  # (T,)
            motion[:, pat.driver, :] = wave[:, None] * joint_dirs[pat.driver]
            for coupling, j in zip(pat.couplings, pat.driven):
                motion[:, j, :] = coupling * wave[:, None] * joint_dirs[j]
            for phase, j in zip(distract_phases, distractors):
                w = distractor_scale * amplitude * np.sin(omega * t_grid + phase)
                motion[:, j, :] = w[:, None] * joint_dirs[j]

            noise = rng.normal(0.0, noise_scale * amplitude,
                               size=(frames, joints, channels))
            raw = rest[None, :, :] + motion + noise
            quantized = raw.astype(np.float32).astype(np.float64)
            sequences.append(SkeletonSequence(quantized, label))
    return Dataset(sequences, class_count, split)


# ---------------------------------------------------------------------------
# binary dataset file
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path):
    """Write the SKGC v1 binary format (little-endian, float32 payload)."""
    first = dataset.sequences[0]
    t, n, c = first.frames.shape
    for s in dataset.sequences:
        if s.frames.shape != (t, n, c):
            raise BadConfigError(
                "the dataset file format requires homogeneous (T, N, C) shapes")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIIIII", _VERSION, dataset.class_count,
                            len(dataset.sequences), t, n, c))
        for s in dataset.sequences:
            f.write(struct.pack("<IB", s.label, _MODALITY_CODES[s.modality]))
            f.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())


def load_dataset(path, split: str = "train") -> Dataset:
    """Read the SKGC v1 format back; byte offsets are reported on violations."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0)
        header = f.read(24)
        if len(header) != 24:
            raise FormatError("truncated header", offset=4 + len(header))
        version, class_count, count, t, n, c = struct.unpack("<IIIIII", header)
        if version != _VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        if class_count < 1:
            raise FormatError("class_count must be >= 1", offset=8)
        if count < 1:
            raise FormatError("sequence count must be >= 1", offset=12)
        if t < 2:
            raise FormatError(f"T={t} violates T >= 2", offset=16)
        if n < 2:
            raise FormatError(f"N={n} violates N >= 2", offset=20)
        if c < 1:
            raise FormatError("C must be >= 1", offset=24)

        frame_bytes = t * n * c * 4
        sequences = []
        for _ in range(count):
            rec_off = f.tell()
            rec = f.read(5)
            if len(rec) != 5:
                raise FormatError("truncated sequence record", offset=rec_off + len(rec))
            label, mod_code = struct.unpack("<IB", rec)
            if label >= class_count:
                raise FormatError(
                    f"label {label} out of range for {class_count} classes", offset=rec_off)
            if mod_code >= len(MODALITIES):
                raise FormatError(f"unknown modality code {mod_code}", offset=rec_off + 4)
            payload = f.read(frame_bytes)
            if len(payload) != frame_bytes:
                raise FormatError("truncated frame payload",
                                  offset=rec_off + 5 + len(payload))
            frames = np.frombuffer(payload, dtype="<f4").astype(np.float64)
            frames = frames.reshape(t, n, c)
            if not np.all(np.isfinite(frames)):
                raise FormatError("non-finite frame value", offset=rec_off + 5)
            sequences.append(SkeletonSequence(frames, int(label), MODALITIES[mod_code]))
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after last sequence", offset=f.tell() - 1)
    return Dataset(sequences, class_count, split)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.class_count != b.class_count or len(a) != len(b):
        return False
    return all(
        sa.label == sb.label and sa.modality == sb.modality
        and np.array_equal(sa.frames, sb.frames)
        for sa, sb in zip(a.sequences, b.sequences)
    )
