"""Dense NCHW tensors, the deterministic RNG, and small reductions.

Tensors are plain ``numpy`` arrays with four axes (batch, channel, height,
width) stored as float32 in C order.  The helpers here validate shapes and
finiteness so that every downstream layer can assume well-formed input.

The generator is xoshiro256** seeded through splitmix64.  Both are integer
only, so a given seed yields the same stream on every platform.
"""
from __future__ import annotations

import sys
from typing import NamedTuple

import numba
import numpy as np

DTYPE = np.float32

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when array extents do not line up."""


class NumericError(ArithmeticError):
    """Raised when a NaN or infinity shows up."""


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @classmethod
    def of(cls, n: int, c: int, h: int, w: int) -> "Shape4":
        dims = tuple(int(d) for d in (n, c, h, w))
        if any(d < 1 for d in dims):
            raise ShapeError(f"all extents must be positive, got {dims}")
        count = 1
        for d in dims:
            count *= d
        if count > sys.maxsize:
            raise ShapeError(f"element count {count} overflows the address space")
        return cls(*dims)

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


def as_shape(shape) -> Shape4:
    if isinstance(shape, Shape4):
        return shape
    if len(shape) != 4:
        raise ShapeError(f"expected 4 extents, got {tuple(shape)}")
    return Shape4.of(*shape)


# --------------------------------------------------------------------------- #
# RNG kernels
# --------------------------------------------------------------------------- #
@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _next(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@numba.njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        out[i] = _next(s)


@numba.njit(cache=True)
def _fill_unit(s, out):
    scale = 1.0 / 9007199254740992.0  # 2**-53
    for i in range(out.shape[0]):
        out[i] = np.float64(_next(s) >> np.uint64(11)) * scale


@numba.njit(cache=True)
def _bounded(s, n):
    # rejection keeps the result exactly uniform on [0, n)
    un = np.uint64(n)
    threshold = (np.uint64(0) - un) % un
    while True:
        x = _next(s)
        if x >= threshold:
            return x % un


@numba.njit(cache=True)
def _shuffle(s, arr):
    for i in range(arr.shape[0] - 1, 0, -1):
        j = _bounded(s, i + 1)
        tmp = arr[i]
        arr[i] = arr[j]
        arr[j] = tmp


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


class Rng:
    """xoshiro256** seeded with four splitmix64 outputs.

    Every draw advances a single 256-bit state; nothing depends on numpy's
    global generator or on the platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        x = self.seed
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self._state = np.array(words, dtype=np.uint64)

    def spawn(self) -> "Rng":
        """Independent child generator seeded from this stream."""
        return Rng(self.next_u64())

    def next_u64(self) -> int:
        out = np.empty(1, dtype=np.uint64)
        _fill_u64(self._state, out)
        return int(out[0])

    def random(self, size: int) -> np.ndarray:
        """``size`` float64 draws in [0, 1) with 53 random bits each."""
        out = np.empty(int(size), dtype=np.float64)
        _fill_unit(self._state, out)
        return out

    def integer(self, n: int) -> int:
        if n < 1:
            raise ValueError("upper bound must be positive")
        return int(_bounded(self._state, n))

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``arange(n)``."""
        arr = np.arange(n, dtype=np.int64)
        _shuffle(self._state, arr)
        return arr

    def getstate(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self._state)


# --------------------------------------------------------------------------- #
# Construction and elementwise ops
# --------------------------------------------------------------------------- #
def check_tensor(a: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(a, np.ndarray) or a.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D array, got {getattr(a, 'shape', type(a))}")
    as_shape(a.shape)
    return a


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        bad = int(np.size(a) - np.count_nonzero(np.isfinite(a)))
        raise NumericError(f"{what} contains {bad} non-finite value(s)")
    return a


def zeros(shape) -> np.ndarray:
    return np.zeros(as_shape(shape), dtype=DTYPE)


def uniform(shape, lo: float, hi: float, rng: Rng) -> np.ndarray:
    """I.i.d. float32 samples on [lo, hi)."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    shape = as_shape(shape)
    u = rng.random(shape.size)
    out = (lo + (hi - lo) * u).astype(DTYPE)
    # float32 rounding may land exactly on hi
    top = np.nextafter(DTYPE(hi), DTYPE(lo))
    out[out >= DTYPE(hi)] = top
    return out.reshape(shape)


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def map_binary(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    try:
        fn = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_BINARY)}") from None
    with np.errstate(over="ignore", invalid="ignore"):
        out = fn(a, b)
    return check_finite(out, f"{op} result")


def reduce_sum(a: np.ndarray) -> float:
    """Sequential float64 sum in ascending flat-index order, cast to float32.

    ``cumsum`` is used rather than ``sum`` because numpy's ``sum`` is
    pairwise and its grouping depends on the array length and SIMD width.
    """
    flat = np.ascontiguousarray(a).reshape(-1)
    if flat.size == 0:
        return 0.0
    total = np.cumsum(flat, dtype=np.float64)[-1]
    if not np.isfinite(total):
        raise NumericError("sum is not finite")
    return float(np.float32(total)) if a.dtype == np.float32 else float(total)


def argmax_channel(a: np.ndarray) -> np.ndarray:
    """Per-row index of the largest channel; ties go to the lowest index."""
    if a.ndim == 2:
        rows = a
    else:
        check_tensor(a)
        if a.shape[2] != 1 or a.shape[3] != 1:
            raise ShapeError(f"argmax_channel needs h == w == 1, got {a.shape}")
        rows = a.reshape(a.shape[0], a.shape[1])
    return np.argmax(rows, axis=1)
