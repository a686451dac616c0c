"""Forward + backward throughput of the GSA kernel in its recurrent and chunkwise forms.

Timings cover one forward and one backward pass on pre-generated inputs; the
reported figure is the median over the timed repetitions.  Peak memory is an
analytic count of the bytes alive at the high-water mark of each form.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import astuple, dataclass

from .kernels import KernelInput, gsa_bwd, gsa_fwd, gsa_recurrent, gsa_recurrent_bwd
from .kernels.types import ChunkSpec
from .tensor import ConfigError, Rng, resolve_dtype

FORMS = ("recurrent", "chunkwise")
CSV_HEADER = "kernel,form,T,d,m,C,dtype,recompute,tokens_per_s,peak_bytes"
RECURRENT_SEGMENT = 64


@dataclass
class BenchRecord:
    kernel: str
    form: str
    T: int
    d: int
    m: int
    C: int
    dtype: str
    recompute: bool
    tokens_per_s: float
    peak_bytes: int

    def row(self) -> list:
        r = list(astuple(self))
        r[7] = "on" if self.recompute else "off"
        r[8] = f"{self.tokens_per_s:.1f}"
        return r


def peak_bytes(form: str, T: int, d: int, m: int, C: int, dtype: str = "f32", recompute: bool = True) -> int:
    """Bytes alive at the high-water mark of one forward + backward.

    Chunkwise: inputs, gate blocks and the saved slot scores are always alive;
    the boundary states of both passes stay alive from forward to backward
    without recompute, while with recompute only one pass's states exist at a
    time (each pass rebuilds its own during backward).  Recurrent: inputs plus
    the per-segment state checkpoints and one segment of per-step states.
    """
    if form not in FORMS:
        raise ConfigError(f"unknown form {form!r}")
    item = resolve_dtype(dtype).itemsize
    inputs = 3 * T * d + T * m + T * d  # q, k, v, log gates, do
    grads = 3 * T * d + 2 * T * m  # dq, dk, dv, d(write), d(log gate)
    if form == "recurrent":
        seg = min(RECURRENT_SEGMENT, T)
        checkpoints = -(-T // seg) * 2 * m * d
        live = 2 * (seg + 1) * m * d + 2 * T * m  # one segment of states, slot scores and weights
        return item * (inputs + checkpoints + live + grads)
    spec = ChunkSpec(min(C, T))
    C = spec.chunk_size
    N = spec.num_chunks(T)
    Tp = N * C
    c = spec.sub_chunk_size
    blocks = Tp * m + Tp * c * m  # prefix sums + diagonal decay blocks
    saved = T * m  # slot scores feeding the second pass
    one_pass_states = (N + 1) * d * m
    states = one_pass_states if recompute else 2 * one_pass_states
    transient = Tp * C + N * d * m + 2 * T * m  # intra-chunk scores, state grads, write strengths, link output
    return item * (inputs + blocks + saved + states + transient + grads)


def _run_once(form, x: KernelInput, do, spec, recompute):
    q, k, v, g, _ = x.astuple()
    if form == "recurrent":
        gsa_recurrent(q, k, v, g)
        gsa_recurrent_bwd(q, k, v, g, do, segment=RECURRENT_SEGMENT)
    else:
        _, saved = gsa_fwd(q, k, v, g, spec=spec, keep_states=not recompute)
        gsa_bwd(q, k, v, g, do, saved, spec=spec, recompute=recompute)


def bench_one(form: str, T: int, d: int, m: int, C: int, dtype: str = "f32", recompute: bool = True,
              repeat: int = 5, warmup: int = 2, seed: int = 0) -> BenchRecord:
    if form not in FORMS:
        raise ConfigError(f"unknown form {form!r}")
    if repeat < 1 or warmup < 0:
        raise ConfigError("repeat must be >= 1 and warmup >= 0")
    rng = Rng.for_stream(seed, T)
    x = KernelInput.random(rng, T, d, d, m, dtype, gate_low=0.9)
    do = rng.normal((T, d), 0.0, 1.0, dtype)
    spec = ChunkSpec(min(C, T))
    for _ in range(warmup):
        _run_once(form, x, do, spec, recompute)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        _run_once(form, x, do, spec, recompute)
        times.append(time.perf_counter() - t0)
    tps = T / statistics.median(times)
    return BenchRecord("gsa", form, T, d, m, C, dtype, recompute, tps, peak_bytes(form, T, d, m, C, dtype, recompute))


def bench_grid(forms, Ts, Cs, d: int = 64, m: int = 64, dtype: str = "f32", recompute: bool = True,
               repeat: int = 5, warmup: int = 2):
    """Records in a fixed order: form, then T, then C (the recurrent form ignores C and runs once per T)."""
    for form in forms:
        for T in Ts:
            for C in (Cs if form == "chunkwise" else Cs[:1]):
                yield bench_one(form, T, d, m, C, dtype, recompute, repeat, warmup)


def write_csv(records, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    stream.write(CSV_HEADER + "\n")
    for r in records:
        w.writerow(r.row())
        stream.flush()

