"""Dense array substrate.

Tensors are plain ``numpy.ndarray`` values in row-major layout; images are
channel-major ``(C, H, W)`` or batched ``(B, C, H, W)``. The helpers here add
the shape checks, singleton-only broadcasting and seeded initialisation the
rest of the package relies on.
"""
from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError

Tensor = np.ndarray

_DEFAULT_DTYPE = np.float32
_CHECK_FINITE = False


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    """Select float32 (production) or float64 (verification) for new tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def set_debug_finite(enabled: bool) -> None:
    """Toggle the NaN/Inf check performed after every op (off by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def debug_finite_enabled() -> bool:
    return _CHECK_FINITE


@contextlib.contextmanager
def debug_finite(enabled: bool = True) -> Iterator[None]:
    old = _CHECK_FINITE
    set_debug_finite(enabled)
    try:
        yield
    finally:
        set_debug_finite(old)


def check_finite(x: Tensor, where: str = "op") -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite value produced by {where}")
    return x


def tensor(data, dtype=None) -> Tensor:
    """Build a contiguous tensor, rejecting empty extents."""
    arr = np.ascontiguousarray(data, dtype=dtype or _DEFAULT_DTYPE)
    if arr.ndim == 0 or 0 in arr.shape:
        raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
    return arr


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Row-by-column product of an ``m x k`` and a ``k x n`` matrix."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = np.asarray(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s < 1 for s in shape):
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = np.asarray(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    return np.ascontiguousarray(x.transpose(axes))


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def broadcastable(a_shape: Sequence[int], b_shape: Sequence[int]) -> bool:
    """True when ``b`` matches ``a`` or is 1 along every differing axis."""
    if len(a_shape) != len(b_shape):
        return False
    return all(bs == as_ or bs == 1 for as_, bs in zip(a_shape, b_shape))


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Pointwise ``add``/``sub``/``mul``; ``b`` may only broadcast along singleton axes."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    a = np.asarray(a)
    b = np.asarray(b)
    if not broadcastable(a.shape, b.shape):
        raise DimensionError(f"cannot broadcast {b.shape} onto {a.shape}")
    return check_finite(fn(a, b), op)


class Rng:
    """Seeded generator; the same seed yields the same draws on every platform."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self) -> float:
        return float(self._gen.random())

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def child(self, *keys: int) -> "Rng":
        """Independent stream keyed by ``(seed, *keys)``; order of creation is irrelevant."""
        seq = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        rng = Rng.__new__(Rng)
        rng.seed = self.seed
        rng._gen = np.random.Generator(np.random.PCG64(seq))
        return rng


def fan_in(shape: Sequence[int]) -> int:
    """Fan-in of a weight: ``C_in*kh*kw`` for conv kernels, rows for ``(D_in, D_out)`` matrices."""
    shape = tuple(shape)
    if len(shape) == 4:
        return int(shape[1] * shape[2] * shape[3])
    if len(shape) == 2:
        return int(shape[0])
    return int(shape[0]) if shape else 1


def seeded_init(rng: Rng, shape: Sequence[int], scheme: str = "kaiming-normal",
                fan: int | None = None, dtype=None) -> Tensor:
    dtype = dtype or _DEFAULT_DTYPE
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme == "ones":
        return np.ones(shape, dtype=dtype)
    if scheme == "kaiming-normal":
        std = np.sqrt(2.0 / (fan if fan is not None else fan_in(shape)))
        return rng.normal(shape, std).astype(dtype)
    if scheme == "normal-0.02":
        return rng.normal(shape, 0.02).astype(dtype)
    raise ValueError(f"unknown init scheme {scheme!r}")
