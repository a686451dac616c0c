from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ..tensor import ConfigError, DimensionError, Rng, resolve_dtype

# log(alpha) below this is treated as alpha == 0
LOG_GATE_FLOOR = -60.0
DEFAULT_CHUNK = 64
DEFAULT_SUB_CHUNK = 16


class GateSide(enum.Enum):
    """Which axis of the outer-product state the decay acts on."""

    KEY = "key"
    VALUE = "value"


@dataclass(frozen=True)
class ChunkSpec:
    chunk_size: int = DEFAULT_CHUNK
    sub_chunk_size: int | None = None

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ConfigError(f"chunk size must be positive, got {self.chunk_size}")
        if self.sub_chunk_size is None:
            object.__setattr__(self, "sub_chunk_size", math.gcd(self.chunk_size, DEFAULT_SUB_CHUNK))
        sub = self.sub_chunk_size
        if not 1 <= sub <= self.chunk_size or self.chunk_size % sub:
            raise ConfigError(f"sub-chunk size {sub} must divide chunk size {self.chunk_size}")

    def bounds(self, T: int):
        """Yield ``(start, stop)`` per chunk; the last chunk keeps its true length."""
        for s in range(0, T, self.chunk_size):
            yield s, min(s + self.chunk_size, T)

    def num_chunks(self, T: int) -> int:
        return -(-T // self.chunk_size)


@dataclass
class GsaState:
    """Slot memories after the last token: ``k_mem`` is [m, d_k], ``v_mem`` is [m, d_v]."""

    k_mem: np.ndarray
    v_mem: np.ndarray


@dataclass
class KernelInput:
    """One sequence (or a batch of them, leading axes) of kernel inputs.

    ``log_gate`` holds log(alpha) per slot; ``write`` holds the write strengths
    (phi for ABC).  ``write=None`` means the coupled GSA form ``1 - alpha``.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    log_gate: np.ndarray
    write: np.ndarray | None = None

    def __post_init__(self):
        T = self.q.shape[-2]
        if T < 1:
            raise DimensionError("sequence length must be >= 1")
        for name in ("k", "v", "log_gate") + (("write",) if self.write is not None else ()):
            arr = getattr(self, name)
            if arr.shape[-2] != T:
                raise DimensionError(f"{name} has length {arr.shape[-2]}, expected {T}")
        if self.k.shape[-1] != self.q.shape[-1]:
            raise DimensionError("q and k must share their feature dimension")
        if np.any(self.log_gate > 0):
            raise ConfigError("log gates must be <= 0")

    @property
    def T(self) -> int:
        return self.q.shape[-2]

    def astuple(self):
        return self.q, self.k, self.v, self.log_gate, self.write

    @classmethod
    def random(cls, rng: Rng, T: int, dk: int, dv: int, m: int, dtype="f64",
               batch: tuple[int, ...] = (), gate_low: float = 0.5) -> "KernelInput":
        """Unit-scale q/k/v and gates alpha drawn from ``(gate_low, 1)``."""
        dt = resolve_dtype(dtype)
        q = rng.normal(batch + (T, dk), 0.0, 1.0, dt)
        k = rng.normal(batch + (T, dk), 0.0, 1.0, dt)
        v = rng.normal(batch + (T, dv), 0.0, 1.0, dt)
        alpha = rng.uniform(batch + (T, m), gate_low, 1.0, "f64")
        return cls(q, k, v, np.log(alpha).astype(dt))


def clamp_log_gate(g: np.ndarray) -> np.ndarray:
    return np.maximum(g, LOG_GATE_FLOOR)
