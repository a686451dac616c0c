"""Dense array primitives and a counter-based RNG.

Tensors are plain ``numpy.ndarray`` objects (row-major, float32 or float64).
The helpers here add the shape/dtype checks and the numerically careful
variants (max-shifted softmax, log-space sigmoid) that the kernels rely on.

The generator is SplitMix64 used in counter mode: the ``i``-th 64-bit word of
a stream keyed by ``key`` is ``mix(key + (i + 1) * 0x9E3779B97F4A7C15)``.
Because every word is a pure function of ``(key, i)`` the stream is identical
on every platform and can be reproduced in other languages.  Reference words
for ``Rng(0)``::

    0xe220a8397b1dcdaf, 0x6e789e6aa1b965f4, 0x06c45d188009454f
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import expit

DTYPES = {"f32": np.float32, "f64": np.float64}

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of an elementwise function."""


class ConfigError(ValueError):
    """Invalid configuration or distribution parameters."""


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ConfigError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}") from None
    return np.dtype(dtype)


def dtype_name(dtype) -> str:
    dt = np.dtype(dtype)
    for name, t in DTYPES.items():
        if dt == t:
            return name
    raise ConfigError(f"unsupported dtype {dt}")


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# core ops


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_bwd(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of ``softmax_rows`` given its output ``p``."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def cumsum(x: np.ndarray, reversed: bool = False, axis: int = -2) -> np.ndarray:
    """Inclusive prefix sum along the time axis (suffix sum when ``reversed``)."""
    if not reversed:
        return np.cumsum(x, axis=axis)
    flipped = np.flip(x, axis=axis)
    return np.flip(np.cumsum(flipped, axis=axis), axis=axis)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def logsigmoid(x: np.ndarray) -> np.ndarray:
    return np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))


def swish(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def swish_bwd(x: np.ndarray, dy: np.ndarray, sig: np.ndarray | None = None) -> np.ndarray:
    """``sig`` may carry ``sigmoid(x)`` saved from the forward pass."""
    s = sigmoid(x) if sig is None else sig
    return dy * (s * (1.0 + x * (1.0 - s)))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0).astype(x.dtype, copy=False)


def relu2(x: np.ndarray) -> np.ndarray:
    r = relu(x)
    return r * r


def _log(x: np.ndarray) -> np.ndarray:
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return np.log(x)


_UNARY = {
    "sigmoid": sigmoid,
    "swish": swish,
    "relu": relu,
    "relu2": relu2,
    "exp": np.exp,
    "log": _log,
}
_BINARY = {"mul": np.multiply, "add": np.add, "sub": np.subtract}


def ew(op: str, *args: np.ndarray) -> np.ndarray:
    """Apply a named elementwise op; binary ops broadcast their operands."""
    if op in _UNARY:
        if len(args) != 1:
            raise ConfigError(f"{op} takes one operand")
        return _UNARY[op](np.asarray(args[0]))
    if op in _BINARY:
        if len(args) != 2:
            raise ConfigError(f"{op} takes two operands")
        a, b = np.asarray(args[0]), np.asarray(args[1])
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as exc:
            raise DimensionError(str(exc)) from None
        return _BINARY[op](a, b)
    raise ConfigError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# rng


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix_key(*parts: int) -> int:
    """Fold integers into one 64-bit stream key."""
    acc = np.zeros(1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for p in parts:
            acc = _mix64(acc + _GOLDEN + np.array([p & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    return int(acc[0])


class Rng:
    """Counter-based SplitMix64 stream.  Single owner; not thread safe."""

    def __init__(self, seed: int, counter: int = 0):
        self.key = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    @classmethod
    def for_stream(cls, seed: int, stream: int) -> "Rng":
        return cls(mix_key(seed, stream))

    def state(self) -> tuple[int, int]:
        return self.key, self.counter

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * _GOLDEN
            return _mix64(z)

    def _unit(self, n: int) -> np.ndarray:
        # 53 high bits -> [0, 1)
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def uniform(self, shape: Sequence[int] | int, a: float = 0.0, b: float = 1.0, dtype="f64") -> np.ndarray:
        if not b > a:
            raise ConfigError(f"uniform needs b > a, got a={a}, b={b}")
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = a + (b - a) * self._unit(n)
        # rounding in a + (b-a)*u can land exactly on b
        u = np.where(u >= b, np.nextafter(b, a), u)
        out = u.reshape(shape).astype(resolve_dtype(dtype))
        if out.dtype != np.float64:
            out = np.where(out >= b, np.nextafter(out.dtype.type(b), out.dtype.type(a)), out)
        return out

    def normal(self, shape: Sequence[int] | int, mu: float = 0.0, sigma: float = 1.0, dtype="f64") -> np.ndarray:
        if not sigma > 0:
            raise ConfigError(f"normal needs sigma > 0, got {sigma}")
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        half = (n + 1) // 2
        u1 = 1.0 - self._unit(half)  # (0, 1]
        u2 = self._unit(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return (mu + sigma * z).reshape(shape).astype(resolve_dtype(dtype))

    def integers(self, high: int, shape: Sequence[int] | int = ()) -> np.ndarray:
        """Uniform integers in ``[0, high)``."""
        if high <= 0:
            raise ConfigError("integers needs high > 0")
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        return np.floor(self._unit(n) * high).astype(np.int64).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self._unit(n), kind="stable")


def rng_fill(rng: Rng, shape, dist: str = "uniform", a: float = 0.0, b: float = 1.0, dtype="f64") -> np.ndarray:
    """Fill a tensor from ``uniform(a, b)`` or ``normal(mu=a, sigma=b)``."""
    if dist == "uniform":
        return rng.uniform(shape, a, b, dtype)
    if dist == "normal":
        return rng.normal(shape, a, b, dtype)
    raise ConfigError(f"unknown distribution {dist!r}")
