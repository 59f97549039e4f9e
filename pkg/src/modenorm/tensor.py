"""Small dense-tensor layer over numpy.

Tensors are plain ``float64`` ndarrays in C (row-major) order. The helpers
here validate shapes and refuse silent Inf production, which numpy would
otherwise allow.
"""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ShapeError(f"dimensions must be positive, got {shape}")
    return shape


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def ones(shape: Sequence[int]) -> np.ndarray:
    return np.ones(_check_shape(shape), dtype=DTYPE)


def full(shape: Sequence[int], value: float) -> np.ndarray:
    return np.full(_check_shape(shape), float(value), dtype=DTYPE)


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


class Rng:
    """Seeded generator; normals come from Box-Muller on (0, 1] uniforms.

    The same seed always reproduces the same stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size) -> np.ndarray:
        # random() is in [0, 1); flip it to (0, 1] so log() stays finite
        return 1.0 - self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))


def randn(shape: Sequence[int], rng: Rng) -> np.ndarray:
    shape = _check_shape(shape)
    count = math.prod(shape)
    pairs = (count + 1) // 2
    u1 = rng.uniform(pairs)
    u2 = rng.uniform(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)])
    return z[:count].reshape(shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def _norm_axes(ndim: int, axes: Iterable[int] | int | None) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(x: np.ndarray, axes=None, kind: str = "sum", keepdims: bool = False) -> np.ndarray:
    axes = _norm_axes(x.ndim, axes)
    if kind == "sum":
        return np.sum(x, axis=axes, keepdims=keepdims)
    if kind == "mean":
        return np.mean(x, axis=axes, keepdims=keepdims)
    raise ValueError(f"unknown reduction {kind!r}")


def _same_shape(a, b):
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc
    return a, b


def add(a, b) -> np.ndarray:
    a, b = _same_shape(a, b)
    return a + b


def sub(a, b) -> np.ndarray:
    a, b = _same_shape(a, b)
    return a - b


def mul(a, b) -> np.ndarray:
    a, b = _same_shape(a, b)
    return a * b


def div(a, b) -> np.ndarray:
    a, b = _same_shape(a, b)
    if np.any(b == 0.0):
        raise ZeroDivisionError("division by an exact zero")
    return a / b


def scale(a, s: float) -> np.ndarray:
    return np.asarray(a, dtype=DTYPE) * float(s)
