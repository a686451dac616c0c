"""Gated slot attention as two chained GLA passes, forward and backward.

Pass 1 reads the key slots: queries ``q``, keys ``k``, values ``I`` (the write
strengths), decay on the value side.  Its output ``o_k`` holds the slot scores.
Pass 2 reads the value slots: queries ``link(o_k)``, keys ``I``, values ``v``,
decay on the key side.  ABC is the same pair of passes with no decay and
cumulative-softmax write strengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import cumsum
from .chunk import GateBlocks, chunk_states, gla_chunkwise_bwd, gla_chunkwise_fwd
from .links import check_link, link_bwd, link_fwd
from .recurrent import la_recurrent
from .types import ChunkSpec, GateSide, GsaState, clamp_log_gate


@dataclass
class GsaSaved:
    """What the forward keeps for the backward.  ``states_*`` are ``None`` under recompute."""

    ok: np.ndarray
    states_k: np.ndarray | None = None
    states_v: np.ndarray | None = None

    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.ok, self.states_k, self.states_v) if a is not None)


@dataclass
class GsaGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dlog_gate: np.ndarray
    dwrite: np.ndarray | None = None


def write_strengths(log_gate: np.ndarray, write: np.ndarray | None) -> np.ndarray:
    return -np.expm1(clamp_log_gate(log_gate)) if write is None else write


def gsa_fwd(q, k, v, log_gate, write=None, spec: ChunkSpec | None = None, link: str = "softmax",
            keep_states: bool = True):
    """Chunkwise GSA forward.  Returns ``(o, saved)``."""
    check_link(link)
    spec = spec or ChunkSpec()
    I = write_strengths(log_gate, write)
    G = GateBlocks(log_gate, spec)
    ok, sk = gla_chunkwise_fwd(q, k, I, log_gate, GateSide.VALUE, spec, blocks=G)
    qv = link_fwd(link, ok)
    o, sv = gla_chunkwise_fwd(qv, I, v, log_gate, GateSide.KEY, spec, blocks=G)
    if keep_states:
        return o, GsaSaved(ok, sk, sv)
    return o, GsaSaved(ok)


def final_state(saved: GsaSaved) -> GsaState:
    """Slot memories after the last token, read off the saved boundary states."""
    return GsaState(np.swapaxes(saved.states_k[..., -1, :, :], -1, -2), saved.states_v[..., -1, :, :])


def gsa_bwd(q, k, v, log_gate, do, saved: GsaSaved, write=None, spec: ChunkSpec | None = None,
            link: str = "softmax", recompute: bool = False) -> GsaGrads:
    """Backward of ``gsa_fwd``: pass 2, link Jacobian, pass 1, then the gate gradient.

    The gate gradient is a reversed cumsum of the per-step contributions of both
    passes; with coupled write strengths the ``I = 1 - alpha`` path is added too,
    so ``dlog_gate`` is the full gradient w.r.t. log alpha.
    """
    check_link(link)
    spec = spec or ChunkSpec()
    if saved.ok.shape[-2] != q.shape[-2]:
        raise ValueError("saved activations do not match the inputs")
    g = clamp_log_gate(log_gate)
    I = write_strengths(log_gate, write)
    G = GateBlocks(log_gate, spec)
    recompute = recompute or saved.states_k is None or saved.states_v is None
    # under recompute each pass rebuilds its own states, so only one set is alive at a time
    sv = chunk_states(I, v, log_gate, GateSide.KEY, spec, blocks=G) if recompute else saved.states_v
    ok = saved.ok
    qv = link_fwd(link, ok)
    dqv, dI_v, dv, part_v = gla_chunkwise_bwd(qv, I, v, log_gate, do, GateSide.KEY, spec, sv, blocks=G)
    del sv
    dok = link_bwd(link, ok, qv, dqv)
    sk = chunk_states(k, I, log_gate, GateSide.VALUE, spec, blocks=G) if recompute else saved.states_k
    dq, dk, dI_k, part_k = gla_chunkwise_bwd(q, k, I, log_gate, dok, GateSide.VALUE, spec, sk, o=ok, blocks=G)
    dI = dI_k + dI_v
    dlog = cumsum(part_k + part_v, reversed=True)
    dwrite = dI
    if write is None:
        dlog = dlog - dI * np.exp(g)
        dwrite = None
    dlog = np.where(log_gate < g, 0, dlog).astype(q.dtype, copy=False)
    return GsaGrads(dq, dk, dv, dlog, dwrite)


def abc_fwd(q, k, v, phi, spec: ChunkSpec | None = None, link: str = "softmax"):
    """Chunkwise ABC: GSA passes with no decay and explicit write strengths."""
    zero = np.zeros_like(phi)
    return gsa_fwd(q, k, v, zero, phi, spec, link)


def abc_two_pass(q, k, v, phi):
    """ABC as two plain linear-attention passes joined by a softmax over slots."""
    ok, _ = la_recurrent(q, k, phi)
    qv = link_fwd("softmax", ok)
    o, _ = la_recurrent(qv, phi, v)
    return o
