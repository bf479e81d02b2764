"""Training-recipe optimization: Adam, gradient clipping, plateau LR decay.

Defaults follow the recipe this library trains with: Adam (beta1=0.9,
beta2=0.999, eps=1e-8) with the gradient's maximum amplitude constrained to
1 (elementwise clamp), and the learning rate cut by a factor of 10 whenever
training accuracy stops increasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CLIP_ELEMENT = "element"
CLIP_NORM = "norm"


def clip_gradients(grads: dict, max_amp: float = 1.0,
                   mode: str = CLIP_ELEMENT) -> dict:
    """Bound gradient amplitude; returns a new gradient dict.

    "element" clamps every scalar to [-max_amp, +max_amp] (the default
    reading of constraining the gradient's maximum amplitude).  "norm"
    rescales all gradients together so their global L2 norm is <= max_amp.
    """
    if max_amp <= 0:
        raise ValueError(f"max_amp must be positive, got {max_amp}")
    if mode == CLIP_ELEMENT:
        return {name: np.clip(g, -max_amp, max_amp) for name, g in grads.items()}
    if mode == CLIP_NORM:
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = 1.0 if total <= max_amp else max_amp / total
        return {name: g * scale for name, g in grads.items()}
    raise ValueError(f"unknown clip mode {mode!r}")


class AdamState:
    """Per-parameter first/second moment estimates and the step counter."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(arr) for name, arr in params.items()}
        self.v = {name: np.zeros_like(arr) for name, arr in params.items()}

    def to_dict(self) -> dict:
        return {"step": self.step, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        state = cls(d["m"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"])
        state.step = int(d["step"])
        state.m = {k: np.array(v) for k, v in d["m"].items()}
        state.v = {k: np.array(v) for k, v in d["v"].items()}
        return state


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied to `params` in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class LrSchedule:
    """Cut lr by `decay_factor` after `patience` epochs without a training
    accuracy improvement; never decays below `floor`."""

    lr: float
    decay_factor: float = 10.0
    patience: int = 1
    floor: float = 1e-6
    best_acc: float = field(default=-math.inf)
    bad_epochs: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.decay_factor <= 1:
            raise ValueError("decay_factor must exceed 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def to_dict(self) -> dict:
        return {"lr": self.lr, "decay_factor": self.decay_factor,
                "patience": self.patience, "floor": self.floor,
                "best_acc": self.best_acc, "bad_epochs": self.bad_epochs}

    @classmethod
    def from_dict(cls, d: dict) -> "LrSchedule":
        return cls(**d)


def schedule_update(sched: LrSchedule, train_acc: float) -> LrSchedule:
    """Fold one epoch's training accuracy into the schedule."""
    if not 0.0 <= train_acc <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {train_acc}")
    if train_acc > sched.best_acc:
        sched.best_acc = train_acc
        sched.bad_epochs = 0
    else:
        sched.bad_epochs += 1
        if sched.bad_epochs >= sched.patience:
            sched.bad_epochs = 0
            if sched.lr > sched.floor:
                sched.lr = max(sched.lr / sched.decay_factor, sched.floor)
    return sched
