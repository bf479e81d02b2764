"""Stacked recurrent layers plus a fully connected softmax classifier,
and the binary checkpoint format.

Checkpoint layout (version 1): a UTF-8 text header of key-value lines
(version, canonical-JSON config, seed record, extra JSON, and a tensor
directory of name/shape/byte-offset entries), an ``end`` marker, the raw
tensor payload as little-endian float64 in directory order, and a trailing
little-endian CRC-32 of every preceding byte.  Saving is deterministic, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine
from .cells import (CellParams, GATE_ACTIVATIONS, GATE_SIGMOID, KINDS,
                    WEIGHT_NAMES)
from .data import SequenceBatch
from .numerics import RngStream, softmax

CHECKPOINT_MAGIC = "RNNCKPT"
CHECKPOINT_VERSION = 1

READOUT_FINAL = "final_step"
READOUT_MEAN = "mean_over_time"
READOUTS = (READOUT_FINAL, READOUT_MEAN)


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt, or version-mismatched checkpoints."""


@dataclass
class LayerSpec:
    kind: str
    hidden_dim: int
    gated: bool = False
    gate_activation: str = GATE_SIGMOID


@dataclass
class NetworkConfig:
    """Architecture description: layer stack, classifier head, readout."""

    input_dim: int
    num_classes: int
    layers: list
    dropout_p: float = 0.0
    readout: str = READOUT_FINAL

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.layers) == 0:
            raise ValueError("at least one recurrent layer is required")
        for i, spec in enumerate(self.layers):
            if spec.kind not in KINDS:
                raise ValueError(f"layer {i}: unknown kind {spec.kind!r}")
            if spec.hidden_dim < 1:
                raise ValueError(f"layer {i}: hidden_dim must be positive")
            if spec.gate_activation not in GATE_ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown gate activation "
                                 f"{spec.gate_activation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}, got {self.readout!r}")

    def layer_input_dims(self) -> list:
        """Input dimension of each layer (chained: previous hidden dim)."""
        dims = [self.input_dim]
        for spec in self.layers[:-1]:
            dims.append(spec.hidden_dim)
        return dims

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "dropout_p": self.dropout_p,
            "readout": self.readout,
            "layers": [{"kind": s.kind, "hidden_dim": s.hidden_dim,
                        "gated": s.gated, "gate_activation": s.gate_activation}
                       for s in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        layers = [LayerSpec(kind=s["kind"], hidden_dim=s["hidden_dim"],
                            gated=s["gated"], gate_activation=s["gate_activation"])
                  for s in d["layers"]]
        return cls(input_dim=d["input_dim"], num_classes=d["num_classes"],
                   layers=layers, dropout_p=d["dropout_p"], readout=d["readout"])


class Network:
    """Stacked recurrent blocks with a linear softmax head."""

    def __init__(self, config: NetworkConfig, layers: list,
                 w_out: np.ndarray, b_out: np.ndarray):
        self.config = config
        self.layers = layers
        self.w_out = w_out
        self.b_out = b_out

    @property
    def num_params(self) -> int:
        return sum(arr.size for _, arr in self.named_parameters())

    def named_parameters(self):
        """(name, array) pairs in a fixed order; arrays are live views."""
        out = []
        for i, cell in enumerate(self.layers):
            for name, arr in cell.named_tensors():
                out.append((f"layers.{i}.{name}", arr))
        out.append(("fc.w", self.w_out))
        out.append(("fc.b", self.b_out))
        return out

    def set_parameter(self, name: str, value: np.ndarray):
        for pname, arr in self.named_parameters():
            if pname == name:
                if arr.shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {arr.shape}")
                arr[...] = value
                return
        raise KeyError(name)


def build(config: NetworkConfig, seed: int) -> Network:
    """Initialize a network deterministically from `seed`.

    Weight matrices are uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)];
    biases start at zero.
    """
    rng = RngStream(seed)
    layers = []
    for spec, d_in in zip(config.layers, config.layer_input_dims()):
        layers.append(CellParams.init(spec.kind, d_in, spec.hidden_dim, rng,
                                      gated=spec.gated,
                                      gate_activation=spec.gate_activation))
    n_top = config.layers[-1].hidden_dim
    bound = 1.0 / np.sqrt(n_top)
    w_out = rng.uniform(-bound, bound, (config.num_classes, n_top))
    b_out = np.zeros((config.num_classes, 1))
    return Network(config, layers, w_out, b_out)


def predict(model: Network, batch: SequenceBatch) -> np.ndarray:
    """Class probabilities, shape (num_classes, batch); columns sum to 1.

    Eval mode: no dropout, no RNG use, deterministic.
    """
    _, logits = engine.unroll_forward(model, batch, train=False)
    return softmax(logits, axis=0)


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def _canon_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(model: Network, path, *, seed: int = 0,
                    opt_state: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    """Serialize model (and optionally optimizer state) to `path`.

    `opt_state` is the dict form of an Adam state ({"step", "beta1",
    "beta2", "eps", "m": {...}, "v": {...}}); its moment tensors are stored
    under opt.m.* / opt.v.* names.  `extra` is any JSON-serializable dict
    (the trainer keeps its schedule and epoch counters here).
    """
    tensors = list(model.named_parameters())
    opt_scalars = None
    if opt_state is not None:
        opt_scalars = {k: opt_state[k] for k in ("step", "beta1", "beta2", "eps")}
        for pname, _ in model.named_parameters():
            tensors.append((f"opt.m.{pname}", opt_state["m"][pname]))
            tensors.append((f"opt.v.{pname}", opt_state["v"][pname]))

    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    lines.append("config " + _canon_json(model.config.to_dict()))
    lines.append(f"seed {int(seed)}")
    lines.append("optimizer " + (_canon_json(opt_scalars) if opt_scalars else "-"))
    lines.append("extra " + _canon_json(extra or {}))
    offset = 0
    for name, arr in tensors:
        lines.append(f"tensor {name} {arr.shape[0]} {arr.shape[1]} {offset}")
        offset += arr.size * 8
    lines.append("end")

    blob = bytearray(("\n".join(lines) + "\n").encode("utf-8"))
    for _, arr in tensors:
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    blob += zlib.crc32(bytes(blob)).to_bytes(4, "little")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


@dataclass
class LoadedCheckpoint:
    model: Network
    seed: int
    opt_state: Optional[dict]
    extra: dict


def load_checkpoint(path) -> LoadedCheckpoint:
    """Read a checkpoint; verifies CRC-32 integrity and format version."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 5:
        raise CheckpointError(f"{path}: file truncated")
    body, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(body) != int.from_bytes(crc_bytes, "little"):
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")

    marker = body.find(b"\nend\n")
    if marker < 0:
        raise CheckpointError(f"{path}: header missing 'end' marker")
    header = body[:marker + 1].decode("utf-8").splitlines()
    payload = body[marker + 5:]

    magic, _, version = header[0].partition(" ")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path}: unsupported checkpoint version {version!r}, "
                              f"expected {CHECKPOINT_VERSION}")

    config = seed = None
    opt_scalars = None
    extra = {}
    directory = []
    for line in header[1:]:
        key, _, rest = line.partition(" ")
        if key == "config":
            config = NetworkConfig.from_dict(json.loads(rest))
        elif key == "seed":
            seed = int(rest)
        elif key == "optimizer":
            opt_scalars = None if rest == "-" else json.loads(rest)
        elif key == "extra":
            extra = json.loads(rest)
        elif key == "tensor":
            name, rows, cols, off = rest.rsplit(" ", 3)
            directory.append((name, int(rows), int(cols), int(off)))
        else:
            raise CheckpointError(f"{path}: unknown header record {key!r}")
    if config is None or seed is None:
        raise CheckpointError(f"{path}: incomplete header")

    expected = sum(r * c for _, r, c, _ in directory) * 8
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, "
                              f"directory implies {expected}")

    values = {}
    for name, rows, cols, off in directory:
        n = rows * cols * 8
        values[name] = np.frombuffer(payload[off:off + n],
                                     dtype="<f8").reshape(rows, cols).copy()

    model = build(config, seed=0)
    for pname, _ in model.named_parameters():
        if pname not in values:
            raise CheckpointError(f"{path}: missing tensor {pname}")
        model.set_parameter(pname, values[pname])

    opt_state = None
    if opt_scalars is not None:
        opt_state = dict(opt_scalars)
        opt_state["m"] = {p: values[f"opt.m.{p}"] for p, _ in model.named_parameters()}
        opt_state["v"] = {p: values[f"opt.v.{p}"] for p, _ in model.named_parameters()}
    return LoadedCheckpoint(model=model, seed=seed, opt_state=opt_state, extra=extra)
