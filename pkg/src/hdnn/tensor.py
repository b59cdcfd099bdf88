"""Dense float64 tensors and a seeded random stream.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The helpers here add the shape checks the rest of the package relies
on; there is no broadcasting apart from tensor-with-scalar operations.
"""

from __future__ import annotations

import zlib
from typing import Callable, Sequence, Union

import numpy as np

Scalar = Union[int, float]

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor shapes do not agree."""


def tensor_new(shape: Sequence[int], data: Sequence[float] | np.ndarray, *, check_finite: bool = True) -> np.ndarray:
    """Build a row-major float64 tensor from a shape and flat data."""
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ShapeError(f"every dimension must be >= 1, got {shape}")
    flat = np.array(data, dtype=DTYPE).reshape(-1)
    if flat.size != int(np.prod(shape)):
        raise ShapeError(f"shape {shape} needs {int(np.prod(shape))} values, got {flat.size}")
    if check_finite and not np.all(np.isfinite(flat)):
        raise ValueError("tensor data contains NaN or Inf")
    return flat.reshape(shape).copy()


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a: np.ndarray, b: np.ndarray | Scalar | Callable | None = None) -> np.ndarray:
    """Apply ``add``, ``sub``, ``mul``, ``scale`` or ``map`` elementwise.

    ``b`` is a tensor of identical shape or a scalar for the binary ops, a
    scalar for ``scale`` and a unary callable for ``map``. Inputs are never
    modified.
    """
    if op == "scale":
        if not np.isscalar(b):
            raise TypeError("scale needs a scalar factor")
        return a * float(b)
    if op == "map":
        if not callable(b):
            raise TypeError("map needs a callable")
        out = np.asarray(b(a.copy()), dtype=DTYPE)
        if out.shape != a.shape:
            raise ShapeError(f"map changed shape {a.shape} -> {out.shape}")
        return out
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if np.isscalar(b):
        return _BINARY[op](a, float(b))
    b = np.asarray(b)
    if b.shape != a.shape:
        raise ShapeError(f"{op}: shapes differ {a.shape} vs {b.shape}")
    return _BINARY[op](a, b)


def reduce(op: str, a: np.ndarray, axis: int | None = None) -> np.ndarray | float | int:
    """Reduce with ``sum``, ``mean``, ``max`` or ``argmax``.

    ``axis=None`` reduces over all elements. ``argmax`` returns the lowest
    index among ties (flat index when ``axis`` is None).
    """
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.ndim}")
    if op == "sum":
        out = np.sum(a, axis=axis)
    elif op == "mean":
        out = np.mean(a, axis=axis)
    elif op == "max":
        out = np.max(a, axis=axis)
    elif op == "argmax":
        # numpy already returns the first occurrence
        out = np.argmax(a, axis=axis)
        return int(out) if axis is None else out
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return float(out) if axis is None else out


class RngStream:
    """Seeded random stream backed by the Philox counter-based generator.

    Identical seeds give identical sequences. Named child streams let
    independent consumers (initialisation, dropout, shuffling) draw without
    disturbing each other. A stream must not be shared between threads.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._spawn_key = tuple(_spawn_key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self._spawn_key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, name: str) -> "RngStream":
        """Independent stream derived from this one and ``name``."""
        return RngStream(self.seed, self._spawn_key + (zlib.crc32(name.encode("utf-8")),))

    def normal(self, shape: Sequence[int] | int, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
        if stddev < 0:
            raise ValueError(f"stddev must be >= 0, got {stddev}")
        if stddev == 0:
            return np.full(shape, float(mean), dtype=DTYPE)
        return self._gen.normal(mean, stddev, size=shape)

    def uniform(self, shape: Sequence[int] | int | None = None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def rng_normal(stream: RngStream, shape: Sequence[int] | int, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    return stream.normal(shape, mean, stddev)
