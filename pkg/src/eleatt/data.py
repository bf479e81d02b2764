"""Sequence batches, skeleton-style preprocessing, synthetic benchmarks, I/O.

Sequences are (D, T) float64 arrays, one column per frame.  Skeleton-style
data lays D out as J joint triples (x, y, z), so D = 3J with joint j's
coordinates at rows 3j, 3j+1, 3j+2.

The distractor benchmark is a sequence-classification task where only the
first `informative` input dimensions carry class signal (class-conditional
sinusoid and drifted-random-walk templates) and the remaining dimensions are
i.i.d. noise, which makes element-wise input attention measurably useful.
"""

from __future__ import annotations

import hashlib
import io
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .numerics import RngStream

DATASET_MAGIC = "RNNDATA"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised for malformed, truncated, or checksum-failing dataset files."""


@dataclass
class SequenceBatch:
    """A set of variable-length input sequences with class labels."""

    sequences: list
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def input_dim(self) -> int:
        return self.sequences[0].shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return np.array([s.shape[1] for s in self.sequences], dtype=np.int64)

    def subset(self, indices) -> "SequenceBatch":
        indices = np.asarray(indices)
        return SequenceBatch([self.sequences[i] for i in indices],
                             self.labels[indices], self.num_classes)


def check_batch(batch: SequenceBatch, name: str = "batch") -> SequenceBatch:
    """Validate a SequenceBatch: consistent dims, finite data, valid labels."""
    if len(batch) == 0:
        raise ValueError(f"{name} is empty")
    if len(batch.sequences) != len(batch.labels):
        raise ValueError(f"{name}: {len(batch.sequences)} sequences but "
                         f"{len(batch.labels)} labels")
    d = batch.sequences[0].shape[0]
    for i, seq in enumerate(batch.sequences):
        if seq.ndim != 2 or seq.shape[0] != d:
            raise ValueError(f"{name}: sequence {i} has shape {seq.shape}, expected ({d}, T)")
        if seq.shape[1] < 1:
            raise ValueError(f"{name}: sequence {i} is empty")
        if not np.all(np.isfinite(seq)):
            raise ValueError(f"{name}: sequence {i} contains non-finite values")
    if batch.num_classes < 2:
        raise ValueError(f"{name}: num_classes must be >= 2, got {batch.num_classes}")
    if np.any(batch.labels < 0) or np.any(batch.labels >= batch.num_classes):
        raise ValueError(f"{name}: labels outside [0, {batch.num_classes})")
    return batch


# ---------------------------------------------------------------------------
# Skeleton-style preprocessing
# ---------------------------------------------------------------------------

def _as_joints(seq: np.ndarray) -> np.ndarray:
    if seq.ndim != 2 or seq.shape[0] % 3 != 0:
        raise ValueError(f"skeleton sequence must be (3J, T), got {seq.shape}")
    j = seq.shape[0] // 3
    return seq.reshape(j, 3, seq.shape[1])


def center_first_frame(seq: np.ndarray, center_joint: Optional[int] = None) -> np.ndarray:
    """Subtract the first frame's body center from every joint of every frame.

    The body center is the centroid of all joints in frame 1 by default, or
    a named joint when `center_joint` is given.  The same translation is
    applied to the whole sequence, so the result is invariant to any
    constant offset of the input.
    """
    joints = _as_joints(seq)
    if center_joint is None:
        center = joints[:, :, 0].mean(axis=0)
    else:
        if not 0 <= center_joint < joints.shape[0]:
            raise ValueError(f"center_joint {center_joint} out of range "
                             f"for {joints.shape[0]} joints")
        center = joints[center_joint, :, 0]
    out = joints - center[None, :, None]
    return out.reshape(seq.shape)


def rotation_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    """Rotation Rx(ax) @ Ry(ay) @ Rz(az), angles in radians."""
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return rx @ ry @ rz


def rotate_augment(seq: np.ndarray, stream: RngStream,
                   max_degrees: float = 35.0) -> np.ndarray:
    """Rotate all joints of all frames by one random rotation.

    The three axis angles are drawn i.i.d. uniform in [-max_degrees,
    +max_degrees]; draw once per sequence per epoch.
    """
    angles = np.deg2rad(stream.uniform(-max_degrees, max_degrees, 3))
    r = rotation_matrix(*angles)
    joints = _as_joints(seq)
    rotated = np.einsum("ab,jbt->jat", r, joints)
    return np.ascontiguousarray(rotated.reshape(seq.shape))


# ---------------------------------------------------------------------------
# Distractor benchmark
# ---------------------------------------------------------------------------

@dataclass
class DistractorTaskSpec:
    """Synthetic task: `informative` of `dims` input dimensions carry class
    signal, the rest are i.i.d. noise.

    Informative dimensions alternate between two template families: even
    slots are class-conditional sinusoids (frequency varies with the class),
    odd slots are random walks with a class-conditional drift.  `noise` is
    the observation-noise level added to informative dimensions;
    `distractor_scale` is the standard deviation of the noise dimensions.
    """

    dims: int
    informative: int
    classes: int
    t_min: int = 10
    t_max: int = 20
    noise: float = 0.5
    seed: int = 0
    n_train: int = 150
    n_val: int = 50
    n_test: int = 300
    distractor_scale: float = 1.0

    def validate(self):
        if not 1 <= self.informative <= self.dims:
            raise ValueError(f"need 1 <= informative <= dims, got "
                             f"{self.informative} of {self.dims}")
        if self.classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.classes}")
        if not 1 <= self.t_min <= self.t_max:
            raise ValueError(f"bad length range [{self.t_min}, {self.t_max}]")
        if self.noise < 0 or self.distractor_scale < 0:
            raise ValueError("noise levels must be non-negative")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("all split sizes must be positive")


def _sinusoid_freq(k: int, slot: int) -> float:
    # Cycles per frame; classes are separated in frequency, slots detuned.
    return (0.05 + 0.055 * k) * (1.0 + 0.35 * slot)


def _drift_rate(k: int, slot: int, classes: int) -> float:
    centered = k - (classes - 1) / 2.0
    return 0.14 * centered * (1.0 + 0.25 * slot)


def _gen_sequence(spec: DistractorTaskSpec, label: int, stream: RngStream) -> np.ndarray:
    t = int(stream.integers(spec.t_min, spec.t_max + 1))
    x = np.zeros((spec.dims, t))
    frames = np.arange(t, dtype=np.float64)
    for s in range(spec.informative):
        if s % 2 == 0:
            phase = stream.uniform(0.0, 2.0 * np.pi, ())
            x[s] = np.sin(2.0 * np.pi * _sinusoid_freq(label, s // 2) * frames + phase)
        else:
            steps = _drift_rate(label, s // 2, spec.classes) + 0.15 * stream.normal(t)
            x[s] = np.cumsum(steps)
        if spec.noise > 0:
            x[s] += spec.noise * stream.normal(t)
    if spec.informative < spec.dims:
        x[spec.informative:] = spec.distractor_scale * stream.normal(
            (spec.dims - spec.informative, t))
    return x


def _gen_split(spec: DistractorTaskSpec, n: int, stream: RngStream) -> SequenceBatch:
    # Balanced labels in round-robin order, then a seeded shuffle.
    labels = np.array([i % spec.classes for i in range(n)], dtype=np.int64)
    labels = labels[stream.permutation(n)]
    sequences = [_gen_sequence(spec, int(lab), stream) for lab in labels]
    return SequenceBatch(sequences, labels, spec.classes)


def gen_distractor(spec: DistractorTaskSpec):
    """Generate disjoint train/val/test batches, deterministic in spec.seed."""
    spec.validate()
    root = RngStream(spec.seed)
    train = _gen_split(spec, spec.n_train, root.child(0))
    val = _gen_split(spec, spec.n_val, root.child(1))
    test = _gen_split(spec, spec.n_test, root.child(2))
    return train, val, test


# ---------------------------------------------------------------------------
# Dataset file I/O
# ---------------------------------------------------------------------------

def save_dataset(path, splits: dict) -> None:
    """Write named splits to one file.

    Layout: text manifest (magic+version, dims, classes, per-split sequence
    records), then all sequence payloads as raw little-endian float32 in
    manifest order, then a little-endian CRC-32 of everything before it.
    """
    if not splits:
        raise ValueError("refusing to save an empty dataset")
    names = list(splits)
    first = splits[names[0]]
    for name, batch in splits.items():
        check_batch(batch, name)
        if batch.input_dim != first.input_dim or batch.num_classes != first.num_classes:
            raise ValueError(f"split {name!r} disagrees on dims/classes")

    header = io.StringIO()
    header.write(f"{DATASET_MAGIC} {DATASET_VERSION}\n")
    header.write(f"dims {first.input_dim}\n")
    header.write(f"classes {first.num_classes}\n")
    for name, batch in splits.items():
        header.write(f"split {name} {len(batch)}\n")
        for label, seq in zip(batch.labels, batch.sequences):
            header.write(f"seq {int(label)} {seq.shape[1]}\n")
    header.write("end\n")

    blob = bytearray(header.getvalue().encode("utf-8"))
    for batch in splits.values():
        for seq in batch.sequences:
            blob += np.ascontiguousarray(seq, dtype="<f4").tobytes()
    blob += zlib.crc32(bytes(blob)).to_bytes(4, "little")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_dataset(path) -> dict:
    """Read a dataset file written by save_dataset; returns {name: batch}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 5:
        raise DatasetFormatError(f"{path}: file truncated")
    body, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(body) != int.from_bytes(crc_bytes, "little"):
        raise DatasetFormatError(f"{path}: checksum mismatch")

    marker = body.find(b"\nend\n")
    if marker < 0:
        raise DatasetFormatError(f"{path}: manifest missing 'end' marker")
    manifest = body[:marker + 1].decode("utf-8").splitlines()
    payload = body[marker + 5:]

    if not manifest:
        raise DatasetFormatError(f"{path}: empty manifest")
    magic, _, version = manifest[0].partition(" ")
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file (magic {magic!r})")
    if version != str(DATASET_VERSION):
        raise DatasetFormatError(f"{path}: unsupported version {version!r}, "
                                 f"expected {DATASET_VERSION}")

    dims = classes = None
    splits: dict = {}
    records: list = []
    current = None
    for line in manifest[1:]:
        tok = line.split()
        if tok[0] == "dims":
            dims = int(tok[1])
        elif tok[0] == "classes":
            classes = int(tok[1])
        elif tok[0] == "split":
            current = tok[1]
            splits[current] = int(tok[2])
        elif tok[0] == "seq":
            if current is None:
                raise DatasetFormatError(f"{path}: 'seq' record before any split")
            records.append((current, int(tok[1]), int(tok[2])))
        else:
            raise DatasetFormatError(f"{path}: unknown manifest record {tok[0]!r}")
    if dims is None or classes is None or not splits:
        raise DatasetFormatError(f"{path}: incomplete manifest")

    expected_bytes = sum(dims * t for _, _, t in records) * 4
    if len(payload) != expected_bytes:
        raise DatasetFormatError(f"{path}: payload has {len(payload)} bytes, "
                                 f"manifest implies {expected_bytes}")

    out = {name: ([], []) for name in splits}
    offset = 0
    for name, label, t in records:
        n = dims * t * 4
        arr = np.frombuffer(payload[offset:offset + n], dtype="<f4").astype(np.float64)
        out[name][0].append(arr.reshape(dims, t))
        out[name][1].append(label)
        offset += n
    result = {}
    for name, count in splits.items():
        seqs, labels = out[name]
        if len(seqs) != count:
            raise DatasetFormatError(f"{path}: split {name!r} lists {count} sequences "
                                     f"but has {len(seqs)} records")
        result[name] = SequenceBatch(seqs, np.array(labels, dtype=np.int64), classes)
    return result


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
