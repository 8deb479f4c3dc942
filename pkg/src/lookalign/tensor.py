"""Dense float64 tensor primitives, seeded RNG streams and a finite-difference oracle.

Tensors are plain C-contiguous ``numpy.float64`` arrays. The helpers here add the
shape/domain checks the rest of the package relies on and never broadcast beyond
scalars.
"""
from __future__ import annotations

import zlib
from typing import Callable, Iterable

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


def as_tensor(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def zeros(*shape: int) -> np.ndarray:
    return np.zeros(shape, dtype=np.float64)


def ones(*shape: int) -> np.ndarray:
    return np.ones(shape, dtype=np.float64)


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Apply ``op`` in {add, sub, mul, scale, relu, log, exp} elementwise."""
    a = as_tensor(a)
    if op in _BINARY:
        if np.ndim(b) == 0:
            return _BINARY[op](a, float(b))
        b = as_tensor(b)
        if a.shape != b.shape:
            raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    if op == "scale":
        if np.ndim(b) != 0:
            raise DimensionError("scale takes a scalar factor")
        return a * float(b)
    if op == "relu":
        return np.maximum(a, 0.0)
    if op == "log":
        if np.any(a <= 0):
            raise DomainError("log of nonpositive element")
        return np.log(a)
    if op == "exp":
        return np.exp(a)
    raise ValueError(f"unknown elementwise op {op!r}")


def relu(a) -> np.ndarray:
    return elementwise("relu", a)


_REDUCE = {"sum": np.sum, "mean": np.mean, "max": np.max}


def reduce(op: str, a, axes: int | Iterable[int] | None = None, keepdims: bool = False) -> np.ndarray:
    """Reduce over ``axes`` (``None`` means all axes)."""
    a = as_tensor(a)
    if axes is not None:
        axes = (axes,) if isinstance(axes, int) else tuple(axes)
        for ax in axes:
            if not -a.ndim <= ax < a.ndim:
                raise DimensionError(f"axis {ax} invalid for shape {a.shape}")
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    return as_tensor(fn(a, axis=axes, keepdims=keepdims))


def avg_pool2d(a, k: int) -> np.ndarray:
    """Non-overlapping ``k``x``k`` mean pooling over the last two axes."""
    a = as_tensor(a)
    h, w = a.shape[-2:]
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    lead = a.shape[:-2]
    return a.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = as_tensor(x).copy()
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor: float = 1e-12) -> float:
    """||a - b|| / (||a|| + ||b||), the usual gradient-check relative error."""
    a, b = as_tensor(a), as_tensor(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


class SeededRng:
    """Philox-4x64 counter-based generator keyed by a 64-bit seed.

    Child streams are derived by key-splitting: the child's key mixes the parent
    key with a CRC32 of the child name, so consumers never share a stream and
    the derivation is portable.
    """

    ALGORITHM = "philox4x64-10"

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = path
        key = np.array([self.seed, _mix(path)], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str | int) -> "SeededRng":
        tag = zlib.crc32(str(name).encode()) if not isinstance(name, int) else int(name)
        return SeededRng(self.seed, self.path + (tag,))

    def uniform(self, low, high, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)


def _mix(path: tuple[int, ...]) -> int:
    # splitmix64 fold of the child path
    z = 0x9E3779B97F4A7C15
    for tag in path:
        z = (z ^ (tag & 0xFFFFFFFFFFFFFFFF)) * 0xBF58476D1CE4E5B9 & 0xFFFFFFFFFFFFFFFF
        z = (z ^ (z >> 31)) * 0x94D049BB133111EB & 0xFFFFFFFFFFFFFFFF
        z ^= z >> 29
    return z
