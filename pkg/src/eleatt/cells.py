"""Single-timestep recurrent blocks and the element-wise input attention gate.

A block is an ensemble of N recurrent neurons sharing one layer.  Everything
here follows a columns-are-batch convention: inputs are (D, B), hidden
states (N, B), and each update rule is applied column-parallel.

Update rules implemented (x_eff is the gate-modulated input when a gate is
attached, the raw input otherwise):

  standard RNN:   h_t = tanh(W_xh x_eff + W_hh h_prev + b_h)

  LSTM:           i = sigmoid(W_xi x_eff + W_hi h_prev + b_i)
                  f = sigmoid(W_xf x_eff + W_hf h_prev + b_f)
                  c_t = f * c_prev + i * tanh(W_xc x_eff + W_hc h_prev + b_c)
                  o = sigmoid(W_xo x_eff + W_ho h_prev + b_o)
                  h_t = o * tanh(c_t)

  GRU:            r = sigmoid(W_xr x_eff + W_hr h_prev + b_r)
                  z = sigmoid(W_xz x_eff + W_hz h_prev + b_z)
                  h' = tanh(W_xh x_eff + W_hh (r * h_prev) + b_h)
                  h_t = z * h_prev + (1 - z) * h'

  attention gate: a_t = act(W_xa x_t + W_ha h_prev + b_a)   (act: sigmoid
                  by default; softmax over the D elements as an ablation)
                  x_eff = a_t * x_t

The gate response has the input's dimension D and is shared by all N
neurons of the block.  All arithmetic goes through :mod:`eleatt.numerics`
so a FlopCounter can meter the exact operation counts of these code paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import RngStream, add, matmul, mul, sigmoid, softmax, sub, tanh

SRNN = "srnn"
LSTM = "lstm"
GRU = "gru"
KINDS = (SRNN, LSTM, GRU)

GATE_SIGMOID = "sigmoid"
GATE_SOFTMAX = "softmax"
GATE_ACTIVATIONS = (GATE_SIGMOID, GATE_SOFTMAX)

# Per-kind weight tensors. w_x*: (N, D); w_h*: (N, N); b_*: (N, 1).
WEIGHT_NAMES = {
    SRNN: ("w_xh", "w_hh", "b_h"),
    LSTM: ("w_xi", "w_xf", "w_xc", "w_xo",
           "w_hi", "w_hf", "w_hc", "w_ho",
           "b_i", "b_f", "b_c", "b_o"),
    GRU: ("w_xr", "w_xz", "w_xh", "w_hr", "w_hz", "w_hh", "b_r", "b_z", "b_h"),
}
GATE_WEIGHT_NAMES = ("w_xa", "w_ha", "b_a")


def _init_matrix(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    # fan_in is the column count of the matrix as used in W @ v.
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, (rows, cols))


@dataclass
class GateParams:
    """Weights of one element-wise attention gate.

    w_xa is square with side D (the gate output has the same dimension as
    the block input); w_ha is (D, N); b_a is (D, 1).
    """

    w_xa: np.ndarray
    w_ha: np.ndarray
    b_a: np.ndarray
    activation: str = GATE_SIGMOID

    def __post_init__(self):
        if self.activation not in GATE_ACTIVATIONS:
            raise ValueError(f"gate activation must be one of {GATE_ACTIVATIONS}, "
                             f"got {self.activation!r}")
        d = self.w_xa.shape[0]
        if self.w_xa.shape != (d, d):
            raise ValueError(f"w_xa must be square, got {self.w_xa.shape}")
        if self.w_ha.shape[0] != d or self.b_a.shape != (d, 1):
            raise ValueError(f"inconsistent gate shapes: w_xa {self.w_xa.shape}, "
                             f"w_ha {self.w_ha.shape}, b_a {self.b_a.shape}")

    @property
    def input_dim(self) -> int:
        return self.w_xa.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_ha.shape[1]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: RngStream,
             activation: str = GATE_SIGMOID) -> "GateParams":
        return cls(
            w_xa=_init_matrix(rng, input_dim, input_dim),
            w_ha=_init_matrix(rng, input_dim, hidden_dim),
            b_a=np.zeros((input_dim, 1)),
            activation=activation,
        )

    def named_tensors(self):
        for name in GATE_WEIGHT_NAMES:
            yield name, getattr(self, name)


@dataclass
class CellParams:
    """Weights of one recurrent block, optionally with an attention gate."""

    kind: str
    input_dim: int
    hidden_dim: int
    weights: dict
    gate: Optional[GateParams] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        expected = WEIGHT_NAMES[self.kind]
        if tuple(self.weights.keys()) != expected:
            raise ValueError(f"{self.kind} weights must be exactly {expected}, "
                             f"got {tuple(self.weights.keys())}")
        d, n = self.input_dim, self.hidden_dim
        for name, arr in self.weights.items():
            want = ((n, d) if name.startswith("w_x")
                    else (n, n) if name.startswith("w_h")
                    else (n, 1))
            if arr.shape != want:
                raise ValueError(f"{name} must have shape {want}, got {arr.shape}")
        if self.gate is not None:
            if self.gate.input_dim != d or self.gate.hidden_dim != n:
                raise ValueError(f"gate dims ({self.gate.input_dim}, {self.gate.hidden_dim}) "
                                 f"do not match block dims ({d}, {n})")

    @property
    def gated(self) -> bool:
        return self.gate is not None

    @classmethod
    def init(cls, kind: str, input_dim: int, hidden_dim: int, rng: RngStream,
             gated: bool = False, gate_activation: str = GATE_SIGMOID) -> "CellParams":
        """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights, zero biases."""
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
        if input_dim < 1 or hidden_dim < 1:
            raise ValueError(f"dims must be positive, got D={input_dim}, N={hidden_dim}")
        weights = {}
        for name in WEIGHT_NAMES[kind]:
            if name.startswith("w_x"):
                weights[name] = _init_matrix(rng, hidden_dim, input_dim)
            elif name.startswith("w_h"):
                weights[name] = _init_matrix(rng, hidden_dim, hidden_dim)
            else:
                weights[name] = np.zeros((hidden_dim, 1))
        gate = GateParams.init(input_dim, hidden_dim, rng, gate_activation) if gated else None
        return cls(kind, input_dim, hidden_dim, weights, gate)

    def named_tensors(self):
        """Yield (name, array) for every parameter tensor, gate last."""
        for name, arr in self.weights.items():
            yield name, arr
        if self.gate is not None:
            for name, arr in self.gate.named_tensors():
                yield f"gate.{name}", arr

    def initial_state(self, batch: int) -> "StepState":
        h = np.zeros((self.hidden_dim, batch))
        c = np.zeros((self.hidden_dim, batch)) if self.kind == LSTM else None
        return StepState(h=h, c=c)


@dataclass
class StepState:
    """Recurrent state carried between timesteps (c is LSTM-only)."""

    h: np.ndarray
    c: Optional[np.ndarray] = None


def _check_pair(x: np.ndarray, h_prev: np.ndarray, d: int, n: int, who: str):
    if x.ndim != 2 or x.shape[0] != d:
        raise ValueError(f"{who}: input must be ({d}, batch), got {x.shape}")
    if h_prev.ndim != 2 or h_prev.shape[0] != n:
        raise ValueError(f"{who}: hidden state must be ({n}, batch), got {h_prev.shape}")
    if x.shape[1] != h_prev.shape[1]:
        raise ValueError(f"{who}: batch mismatch, input {x.shape} vs state {h_prev.shape}")


def _affine(w_x, x, w_h, h, b):
    return add(add(matmul(w_x, x), matmul(w_h, h)), b)


def gate_forward(x: np.ndarray, h_prev: np.ndarray, gate: GateParams) -> np.ndarray:
    """Attention response a_t = act(W_xa x + W_ha h_prev + b_a), shape (D, B)."""
    _check_pair(x, h_prev, gate.input_dim, gate.hidden_dim, "gate_forward")
    pre = _affine(gate.w_xa, x, gate.w_ha, h_prev, gate.b_a)
    if gate.activation == GATE_SIGMOID:
        return sigmoid(pre)
    return softmax(pre, axis=0)


def modulate(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Elementwise input modulation a * x."""
    if x.shape != a.shape:
        raise ValueError(f"modulate shape mismatch: input {x.shape} vs response {a.shape}")
    return mul(a, x)


def srnn_step_full(x_eff, state, p):
    _check_pair(x_eff, state.h, p.input_dim, p.hidden_dim, "srnn_step")
    w = p.weights
    h = tanh(_affine(w["w_xh"], x_eff, w["w_hh"], state.h, w["b_h"]))
    return StepState(h=h), {"h_raw": h}


def lstm_step_full(x_eff, state, p):
    _check_pair(x_eff, state.h, p.input_dim, p.hidden_dim, "lstm_step")
    if state.c is None or state.c.shape != state.h.shape:
        raise ValueError("lstm_step: state.c must match state.h shape")
    w = p.weights
    i = sigmoid(_affine(w["w_xi"], x_eff, w["w_hi"], state.h, w["b_i"]))
    f = sigmoid(_affine(w["w_xf"], x_eff, w["w_hf"], state.h, w["b_f"]))
    g = tanh(_affine(w["w_xc"], x_eff, w["w_hc"], state.h, w["b_c"]))
    o = sigmoid(_affine(w["w_xo"], x_eff, w["w_ho"], state.h, w["b_o"]))
    c = add(mul(f, state.c), mul(i, g))
    tanh_c = tanh(c)
    h = mul(o, tanh_c)
    return StepState(h=h, c=c), {"i": i, "f": f, "g": g, "o": o, "tanh_c": tanh_c}


def gru_step_full(x_eff, state, p):
    _check_pair(x_eff, state.h, p.input_dim, p.hidden_dim, "gru_step")
    w = p.weights
    h_prev = state.h
    r = sigmoid(_affine(w["w_xr"], x_eff, w["w_hr"], h_prev, w["b_r"]))
    z = sigmoid(_affine(w["w_xz"], x_eff, w["w_hz"], h_prev, w["b_z"]))
    cand = tanh(add(add(matmul(w["w_xh"], x_eff),
                        matmul(w["w_hh"], mul(r, h_prev))), w["b_h"]))
    h = add(mul(z, h_prev), mul(sub(1.0, z), cand))
    return StepState(h=h), {"r": r, "z": z, "cand": cand}


_STEP_FULL = {SRNN: srnn_step_full, LSTM: lstm_step_full, GRU: gru_step_full}


def srnn_step(x_eff, state, p) -> StepState:
    """h_t = tanh(W_xh x_eff + W_hh h_prev + b_h)."""
    if p.kind != SRNN:
        raise ValueError(f"srnn_step called with kind {p.kind!r}")
    return srnn_step_full(x_eff, state, p)[0]


def lstm_step(x_eff, state, p) -> StepState:
    """One LSTM update; returns the new (h, c) state."""
    if p.kind != LSTM:
        raise ValueError(f"lstm_step called with kind {p.kind!r}")
    return lstm_step_full(x_eff, state, p)[0]


def gru_step(x_eff, state, p) -> StepState:
    """One GRU update; h_t is a convex combination of h_prev and the candidate."""
    if p.kind != GRU:
        raise ValueError(f"gru_step called with kind {p.kind!r}")
    return gru_step_full(x_eff, state, p)[0]


def block_step(x, state, p):
    """Full block update: gate (if any), modulate, then the cell step.

    Returns (new_state, attention) where attention is None for ungated
    blocks.
    """
    new_state, _, a, _ = block_step_full(x, state, p)
    return new_state, a


def block_step_full(x, state, p):
    """block_step plus the cell internals needed by backpropagation.

    Returns (new_state, internals, attention, x_eff).
    """
    if p.gate is not None:
        a = gate_forward(x, state.h, p.gate)
        x_eff = modulate(x, a)
    else:
        a = None
        x_eff = x
    new_state, internals = _STEP_FULL[p.kind](x_eff, state, p)
    return new_state, internals, a, x_eff
