"""Chunkwise-vs-recurrent equivalence checks for every kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import (
    ChunkSpec,
    GateSide,
    KernelInput,
    abc_fwd,
    abc_recurrent,
    abc_write_strengths,
    gla_chunkwise_fwd,
    gla_recurrent,
    gsa_fwd,
    gsa_recurrent,
    la_recurrent,
)
from .tensor import ConfigError, Rng, resolve_dtype

KERNELS = ("la", "gla-key", "gla-value", "abc", "gsa")
# ``gla`` on the command line expands to both gate sides
ALIASES = {"la": ("la",), "gla": ("gla-key", "gla-value"), "abc": ("abc",), "gsa": ("gsa",)}
TOLERANCE = {"f64": 1e-11, "f32": 1e-4}


@dataclass
class Deviation:
    kernel: str
    T: int
    C: int
    seed: int
    max_abs: float
    max_rel: float


def _pair(kernel: str, x: KernelInput, rng: Rng, spec: ChunkSpec, dtype):
    """Chunkwise output (in ``dtype``) and the float64 recurrent oracle on the same inputs."""
    q, k, v, g, _ = x.astuple()
    T, m = g.shape
    if kernel == "la":
        zero = np.zeros(q.shape)
        chunk, _ = gla_chunkwise_fwd(*(a.astype(dtype) for a in (q, k, v, zero)), GateSide.KEY, spec)
        ref, _ = la_recurrent(q, k, v)
    elif kernel in ("gla-key", "gla-value"):
        side = GateSide.KEY if kernel == "gla-key" else GateSide.VALUE
        width = k.shape[-1] if side is GateSide.KEY else v.shape[-1]
        lg = np.log(rng.uniform((T, width), 0.5, 1.0))
        chunk, _ = gla_chunkwise_fwd(*(a.astype(dtype) for a in (q, k, v, lg)), side, spec)
        ref, _ = gla_recurrent(q, k, v, lg, side)
    elif kernel == "abc":
        phi = abc_write_strengths(rng.normal((T, m)))
        chunk, _ = abc_fwd(*(a.astype(dtype) for a in (q, k, v, phi)), spec)
        ref = abc_recurrent(q, k, v, phi)
    elif kernel == "gsa":
        chunk, _ = gsa_fwd(*(a.astype(dtype) for a in (q, k, v, g)), spec=spec)
        ref, _ = gsa_recurrent(q, k, v, g)
    else:
        raise ConfigError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    return chunk, ref


def deviation(kernel: str, T: int, d: int, m: int, C: int, seed: int, dtype: str = "f64") -> Deviation:
    rng = Rng.for_stream(seed, T * 1000 + C)
    x = KernelInput.random(rng, T, d, d, m)
    chunk, ref = _pair(kernel, x, rng, ChunkSpec(C), resolve_dtype(dtype))
    diff = np.abs(chunk.astype(np.float64) - ref)
    scale = max(float(np.abs(ref).max()), 1e-300)
    return Deviation(kernel, T, C, seed, float(diff.max()), float(diff.max()) / scale)


def equivalence_suite(kernels, Ts, Cs, d: int, m: int, seeds: int, dtype: str = "f64"):
    """Worst deviation per (kernel, T, C) over ``seeds`` seeds.  ``C`` larger than ``T`` is clipped to ``T``."""
    out = []
    for kernel in kernels:
        for T in Ts:
            for C in sorted({min(c, T) for c in Cs}):
                devs = [deviation(kernel, T, d, m, C, s, dtype) for s in range(seeds)]
                out.append(max(devs, key=lambda r: r.max_abs))
    return out


def expand_kernels(name: str) -> tuple[str, ...]:
    if name in ALIASES:
        return ALIASES[name]
    if name in KERNELS:
        return (name,)
    raise ConfigError(f"unknown kernel {name!r}")
