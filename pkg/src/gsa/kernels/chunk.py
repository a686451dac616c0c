"""Chunkwise-parallel gated linear attention.

Within a chunk the gates live in log space as a chunk-local prefix sum ``b``
(nonincreasing along time).  Every exponential evaluated here has a
nonpositive argument: intra-chunk terms are split into sub-chunks, diagonal
sub-blocks are formed elementwise from ``b_i - b_j`` (``j <= i``) and
off-diagonal sub-blocks go through a matmul with both factors anchored at the
head of the row sub-chunk.

Key-side gating (decay on the rows of ``S``)::

    O_n = (Q * e^b) S_{n-1} + P V,         P_ij = sum_c q_ic k_jc e^(b_ic - b_jc)
    S_n = e^(b_C) * S_{n-1} + (K * e^(b_C - b))^T V

Value-side gating (decay on the columns of ``S``)::

    O_n = (Q S_{n-1}) * e^b + mix(Q K^T, V),  mix_i = sum_j A_ij v_j * e^(b_i - b_j)
    S_n = S_{n-1} * e^(b_C) + K^T (V * e^(b_C - b))

A ragged final chunk is handled by appending neutral steps (zero inputs,
log-gate 0) and dropping them from the results; they add exact zeros to every
sum and leave the gate prefix sums unchanged.  All functions accept leading
batch axes.
"""

from __future__ import annotations

import numpy as np

from ..tensor import DimensionError
from .types import ChunkSpec, GateSide, clamp_log_gate


def _t(x):
    return np.swapaxes(x, -1, -2)


def chunk_cumsum(log_gate: np.ndarray, spec: ChunkSpec) -> np.ndarray:
    """Per-chunk inclusive prefix sum over time; restarts at every chunk boundary."""
    out = np.empty_like(log_gate)
    for s, e in spec.bounds(log_gate.shape[-2]):
        out[..., s:e, :] = np.cumsum(log_gate[..., s:e, :], axis=-2)
    return out


class GateBlocks:
    """Chunk-local gate prefix sums plus the decay factors of the diagonal sub-blocks.

    Built once per gate tensor and shared by every pass that uses those gates.
    """

    def __init__(self, log_gate: np.ndarray, spec: ChunkSpec):
        self.spec = spec
        self.T = T = log_gate.shape[-2]
        C = spec.chunk_size
        self.N = N = spec.num_chunks(T)
        self.C = C
        self.c = c = spec.sub_chunk_size
        g = self.pad(clamp_log_gate(log_gate))
        self.b = np.cumsum(g, axis=-2)
        self.last = self.b[..., -1:, :]
        tril = np.tril(np.ones((c, c), dtype=log_gate.dtype))[:, :, None]
        self.diag = []
        for s0 in range(0, C, c):
            bs = self.b[..., s0:s0 + c, :]
            self.diag.append(np.exp(np.minimum(bs[..., :, None, :] - bs[..., None, :, :], 0)) * tril)

    def pad(self, x: np.ndarray) -> np.ndarray:
        """``[..., T, d]`` -> ``[..., N, C, d]`` with neutral trailing steps."""
        extra = self.N * self.C - self.T
        if extra:
            widths = [(0, 0)] * (x.ndim - 2) + [(0, extra), (0, 0)]
            x = np.pad(x, widths)
        return x.reshape(x.shape[:-2] + (self.N, self.C, x.shape[-1]))

    def unpad(self, x: np.ndarray) -> np.ndarray:
        x = x.reshape(x.shape[:-3] + (self.N * self.C, x.shape[-1]))
        return x[..., :self.T, :]

    def subchunks(self):
        for i, s0 in enumerate(range(0, self.C, self.c)):
            yield i, s0, s0 + self.c


def gated_scores(q, k, G: GateBlocks) -> np.ndarray:
    """Lower-triangular ``A_ij = sum_c q_ic k_jc exp(b_ic - b_jc)`` per chunk, ``[..., N, C, C]``."""
    b = G.b
    out = np.zeros(np.broadcast_shapes(q.shape[:-1], k.shape[:-1]) + (G.C,), dtype=q.dtype)
    for i, s0, s1 in G.subchunks():
        qs, bs = q[..., s0:s1, :], b[..., s0:s1, :]
        out[..., s0:s1, s0:s1] = np.einsum("...id,...jd,...ijd->...ij", qs, k[..., s0:s1, :], G.diag[i])
        if s0:
            h = bs[..., :1, :]
            qg = qs * np.exp(bs - h)
            kg = k[..., :s0, :] * np.exp(h - b[..., :s0, :])
            out[..., s0:s1, :s0] = qg @ _t(kg)
    return out


def gated_mix(W, x, G: GateBlocks) -> np.ndarray:
    """``out_i = sum_{j<=i} W_ij x_j * exp(b_i - b_j)``; only the lower triangle of W is read."""
    b = G.b
    out = np.empty(np.broadcast_shapes(W.shape[:-1], x.shape[:-1]) + (x.shape[-1],), dtype=x.dtype)
    for i, s0, s1 in G.subchunks():
        bs = b[..., s0:s1, :]
        acc = np.einsum("...ij,...jd,...ijd->...id", W[..., s0:s1, s0:s1], x[..., s0:s1, :], G.diag[i])
        if s0:
            h = bs[..., :1, :]
            xg = x[..., :s0, :] * np.exp(h - b[..., :s0, :])
            acc = acc + (W[..., s0:s1, :s0] @ xg) * np.exp(bs - h)
        out[..., s0:s1, :] = acc
    return out


def gated_mix_rev(W, y, G: GateBlocks) -> np.ndarray:
    """``out_j = sum_{i>=j} W_ij y_i * exp(b_i - b_j)``, the adjoint of ``gated_mix``."""
    b = G.b
    out = np.zeros(np.broadcast_shapes(W.shape[:-1], y.shape[:-1]) + (y.shape[-1],), dtype=y.dtype)
    for i, s0, s1 in G.subchunks():
        bs = b[..., s0:s1, :]
        out[..., s0:s1, :] += np.einsum("...ij,...id,...ijd->...jd", W[..., s0:s1, s0:s1], y[..., s0:s1, :],
                                        G.diag[i])
        if s0:
            h = bs[..., :1, :]
            yg = y[..., s0:s1, :] * np.exp(bs - h)
            out[..., :s0, :] += (_t(W[..., s0:s1, :s0]) @ yg) * np.exp(h - b[..., :s0, :])
    return out


def _check(q, k, v, log_gate, side):
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"q/k feature dims differ: {q.shape} vs {k.shape}")
    T = q.shape[-2]
    if k.shape[-2] != T or v.shape[-2] != T or log_gate.shape[-2] != T:
        raise DimensionError("time dimensions disagree")
    expect = k.shape[-1] if side is GateSide.KEY else v.shape[-1]
    if log_gate.shape[-1] != expect:
        raise DimensionError(f"gate width {log_gate.shape[-1]} does not match {side.value} dim {expect}")


def _states(kp, vp, G: GateBlocks, side: GateSide, initial_state=None) -> np.ndarray:
    batch = np.broadcast_shapes(kp.shape[:-3], vp.shape[:-3])
    dk, dv = kp.shape[-1], vp.shape[-1]
    states = np.empty(batch + (G.N + 1, dk, dv), dtype=kp.dtype)
    S = np.zeros(batch + (dk, dv), dtype=kp.dtype) if initial_state is None else initial_state
    decay = np.exp(G.last - G.b)
    carry = np.exp(G.last)
    for n in range(G.N):
        states[..., n, :, :] = S
        if side is GateSide.KEY:
            S = S * _t(carry[..., n, :, :]) + _t(kp[..., n, :, :] * decay[..., n, :, :]) @ vp[..., n, :, :]
        else:
            S = S * carry[..., n, :, :] + _t(kp[..., n, :, :]) @ (vp[..., n, :, :] * decay[..., n, :, :])
    states[..., G.N, :, :] = S
    return states


def chunk_states(k, v, log_gate, side: GateSide, spec: ChunkSpec, initial_state=None, blocks=None) -> np.ndarray:
    """Boundary states ``[..., N + 1, d_k, d_v]``: entry n is the state entering chunk n."""
    G = blocks or GateBlocks(log_gate, spec)
    return _states(G.pad(k), G.pad(v), G, side, initial_state)


def _outputs(qp, kp, vp, G: GateBlocks, side, states):
    S = states[..., :G.N, :, :]
    if side is GateSide.KEY:
        return (qp * np.exp(G.b)) @ S + gated_scores(qp, kp, G) @ vp
    return (qp @ S) * np.exp(G.b) + gated_mix(qp @ _t(kp), vp, G)


def gla_chunkwise_fwd(q, k, v, log_gate, side: GateSide = GateSide.KEY, spec: ChunkSpec | None = None,
                      initial_state=None, blocks: GateBlocks | None = None):
    """Chunkwise GLA.  Returns ``(o, states)`` with boundary states as in ``chunk_states``."""
    spec = spec or ChunkSpec()
    _check(q, k, v, log_gate, side)
    G = blocks or GateBlocks(log_gate, spec)
    qp, kp, vp = G.pad(q), G.pad(k), G.pad(v)
    states = _states(kp, vp, G, side, initial_state)
    return G.unpad(_outputs(qp, kp, vp, G, side, states)), states


def gla_chunkwise_bwd(q, k, v, log_gate, do, side: GateSide = GateSide.KEY, spec: ChunkSpec | None = None,
                      states=None, o=None, blocks: GateBlocks | None = None):
    """Gradients of ``gla_chunkwise_fwd`` (zero initial state).

    Returns ``(dq, dk, dv, dgate_partial)``.  ``dgate_partial`` is the gradient
    w.r.t. the global log-gate prefix sum at each step (``q*dq - k*dk`` key
    side, ``o*do - v*dv`` value side); a reversed cumsum over time turns it into
    the gradient w.r.t. the log gates.  ``states`` are recomputed when omitted,
    ``o`` likewise on the value side.
    """
    spec = spec or ChunkSpec()
    _check(q, k, v, log_gate, side)
    G = blocks or GateBlocks(log_gate, spec)
    qp, kp, vp, dop = G.pad(q), G.pad(k), G.pad(v), G.pad(do)
    if states is None:
        states = _states(kp, vp, G, side)
    if side is GateSide.VALUE and o is None:
        o = G.unpad(_outputs(qp, kp, vp, G, side, states))

    eb = np.exp(G.b)
    decay = np.exp(G.last - G.b)
    carry = np.exp(G.last)
    # dS[n]: gradient w.r.t. the state leaving chunk n
    dS = np.empty(np.broadcast_shapes(states.shape[:-3], dop.shape[:-3]) + (G.N,) + states.shape[-2:],
                  dtype=q.dtype)
    acc = np.zeros(dS.shape[:-3] + dS.shape[-2:], dtype=q.dtype)
    for n in range(G.N - 1, -1, -1):
        dS[..., n, :, :] = acc
        if side is GateSide.KEY:
            acc = acc * _t(carry[..., n, :, :]) + _t(qp[..., n, :, :] * eb[..., n, :, :]) @ dop[..., n, :, :]
        else:
            acc = acc * carry[..., n, :, :] + _t(qp[..., n, :, :]) @ (dop[..., n, :, :] * eb[..., n, :, :])
    Sp = states[..., :G.N, :, :]
    if side is GateSide.KEY:
        dP = dop @ _t(vp)
        dq = (dop @ _t(Sp)) * eb + gated_mix(dP, kp, G)
        dk = (vp @ _t(dS)) * decay + gated_mix_rev(dP, qp, G)
        dv = (kp * decay) @ dS + _t(gated_scores(qp, kp, G)) @ dop
    else:
        D = gated_scores(dop, vp, G)
        dq = (dop * eb) @ _t(Sp) + D @ kp
        dk = (vp * decay) @ _t(dS) + _t(D) @ qp
        dv = (kp @ dS) * decay + gated_mix_rev(qp @ _t(kp), dop, G)
    dq, dk, dv = G.unpad(dq), G.unpad(dk), G.unpad(dv)
    if side is GateSide.KEY:
        partial = q * dq - k * dk
    else:
        partial = o * do - v * dv
    return dq, dk, dv, partial
