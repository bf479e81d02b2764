"""Dense float64 arithmetic with validation, seeded RNG, and FLOP metering.

Matrices are plain 2-D ``numpy.ndarray`` in C (row-major) order.  Every
public operation validates finiteness of its result, so downstream code can
rely on never seeing NaN/Inf unless it manufactured one itself.

All arithmetic that the recurrent cells perform goes through the helpers in
this module.  When a :class:`FlopCounter` is active they meter multiply and
add counts; the convention (one multiply = 1 FLOP, one add/subtract = 1
FLOP, activations free) is the one under which the closed-form cost model in
:mod:`eleatt.analysis` is exact.
"""

from __future__ import annotations

import numpy as np

SIGMOID = "sigmoid"
TANH = "tanh"
SOFTMAX_ROWS = "softmax_rows"

_ACTIVATIONS = (SIGMOID, TANH, SOFTMAX_ROWS)

# Currently installed FlopCounter, or None. Single-threaded by design.
_counter = None


class FlopCounter:
    """Context manager metering multiplies/adds in numerics operations.

    >>> with FlopCounter() as fc:
    ...     matmul(a, b)
    >>> fc.total
    """

    def __init__(self):
        self.muls = 0
        self.adds = 0

    @property
    def total(self) -> int:
        return self.muls + self.adds

    def __enter__(self):
        global _counter
        if _counter is not None:
            raise RuntimeError("a FlopCounter is already active")
        _counter = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _counter
        _counter = None
        return False


def check_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a finite 2-D float64 C-order array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Raises ValueError reporting both operand shapes on inner-dimension
    mismatch.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if _counter is not None:
        r, k = a.shape
        c = b.shape[1]
        _counter.muls += r * c * k
        _counter.adds += r * c * (k - 1)
    return a @ b


def add(a, b) -> np.ndarray:
    out = a + b
    if _counter is not None:
        _counter.adds += out.size
    return out


def sub(a, b) -> np.ndarray:
    out = a - b
    if _counter is not None:
        _counter.adds += out.size
    return out


def mul(a, b) -> np.ndarray:
    out = a * b
    if _counter is not None:
        _counter.muls += out.size
    return out


def sigmoid(v: np.ndarray) -> np.ndarray:
    # Split on sign so exp never overflows.
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def tanh(v: np.ndarray) -> np.ndarray:
    return np.tanh(v)


def softmax(v: np.ndarray, axis: int = 1) -> np.ndarray:
    """Stable softmax along `axis` (max-subtraction)."""
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def activation(v: np.ndarray, kind: str) -> np.ndarray:
    """Apply `kind` in {sigmoid, tanh, softmax_rows} elementwise / per row."""
    if kind == SIGMOID:
        return sigmoid(v)
    if kind == TANH:
        return tanh(v)
    if kind == SOFTMAX_ROWS:
        return softmax(v, axis=1)
    raise ValueError(f"unknown activation {kind!r}, expected one of {_ACTIVATIONS}")


class RngStream:
    """Deterministic random stream.

    Identical (seed, key) produce identical draw sequences across runs and
    platforms (PCG64 backed).  Streams are single-owner: share the seed, not
    the object.  `child` derives an independent stream, which is how
    per-epoch randomness stays reproducible under checkpoint resume.
    """

    def __init__(self, seed: int, key: tuple = ()):
        if not isinstance(seed, (int, np.integer)) or seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *self.key]))
        )

    def child(self, *key: int) -> "RngStream":
        """Independent stream derived from this stream's seed and `key`."""
        return RngStream(self.seed, self.key + tuple(key))

    def uniform(self, lo: float, hi: float, shape) -> np.ndarray:
        if lo > hi:
            raise ValueError(f"uniform bounds out of order: lo={lo} > hi={hi}")
        return self._gen.uniform(lo, hi, size=shape).astype(np.float64, copy=False)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape).astype(np.float64, copy=False)

    def integers(self, lo: int, hi: int, shape=None):
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: float, shape) -> np.ndarray:
        return (self._gen.random(size=shape) < p).astype(np.float64)
