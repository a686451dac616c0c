"""Token-by-token reference forms.

These loops are the ground truth the chunkwise kernels are checked against.
All functions accept arbitrary leading batch axes: ``q`` is ``[..., T, d_k]``.
"""

from __future__ import annotations

import numpy as np

from ..tensor import ConfigError, DimensionError, softmax_rows
from .links import link_bwd, link_fwd
from .types import GateSide, GsaState, clamp_log_gate


def softmax_attention_ref(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Causal softmax attention with 1/sqrt(d) logit scaling."""
    if q.shape != k.shape or q.shape[-2] != v.shape[-2]:
        raise DimensionError(f"incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    T, d = q.shape[-2:]
    logits = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(d)
    future = np.triu(np.ones((T, T), dtype=bool), 1)
    logits = np.where(future, -np.inf, logits)
    return softmax_rows(logits) @ v


def la_recurrent(q, k, v):
    """S_t = S_{t-1} + k_t (x) v_t ;  o_t = S_t^T q_t."""
    T = q.shape[-2]
    S = np.zeros(q.shape[:-2] + (q.shape[-1], v.shape[-1]), dtype=q.dtype)
    o = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=q.dtype)
    for t in range(T):
        S = S + k[..., t, :, None] * v[..., t, None, :]
        o[..., t, :] = np.einsum("...k,...kv->...v", q[..., t, :], S)
    return o, S


def gla_recurrent(q, k, v, log_gate, side: GateSide = GateSide.KEY):
    """Gated linear attention, decay on the key rows or the value columns of S."""
    expect = q.shape[-1] if side is GateSide.KEY else v.shape[-1]
    if log_gate.shape[-1] != expect:
        raise DimensionError(f"gate width {log_gate.shape[-1]} does not match {side.value} dim {expect}")
    alpha = np.exp(clamp_log_gate(log_gate))
    T = q.shape[-2]
    S = np.zeros(q.shape[:-2] + (q.shape[-1], v.shape[-1]), dtype=q.dtype)
    o = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=q.dtype)
    for t in range(T):
        a = alpha[..., t, :, None] if side is GateSide.KEY else alpha[..., t, None, :]
        S = a * S + k[..., t, :, None] * v[..., t, None, :]
        o[..., t, :] = np.einsum("...k,...kv->...v", q[..., t, :], S)
    return o, S


def retnet_style_decay(q, k, v, gamma: float):
    """Data-independent scalar decay: GLA with every gate equal to ``gamma``."""
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    log_gate = np.full(q.shape, np.log(gamma), dtype=q.dtype)
    o, _ = gla_recurrent(q, k, v, log_gate, GateSide.KEY)
    return o


def abc_write_strengths(pre_gate: np.ndarray) -> np.ndarray:
    """Cumulative softmax over time: phi_i = exp(p_i) / sum_{j<=i} exp(p_j)."""
    lse = np.logaddexp.accumulate(pre_gate, axis=-2)
    return np.exp(pre_gate - lse)


def abc_write_strengths_bwd(pre_gate: np.ndarray, phi: np.ndarray, dphi: np.ndarray) -> np.ndarray:
    lse = np.logaddexp.accumulate(pre_gate, axis=-2)
    g = dphi * phi
    # R_j = sum_{i>=j} g_i exp(L_j - L_i), run backwards so every factor is <= 1
    R = np.empty_like(g)
    T = g.shape[-2]
    acc = np.zeros_like(g[..., 0, :])
    for j in range(T - 1, -1, -1):
        if j < T - 1:
            acc = acc * np.exp(lse[..., j, :] - lse[..., j + 1, :])
        acc = acc + g[..., j, :]
        R[..., j, :] = acc
    return g - phi * R


def _slot_recurrent(q, k, v, decay, write, link: str):
    T = q.shape[-2]
    m = write.shape[-1]
    K = np.zeros(q.shape[:-2] + (m, k.shape[-1]), dtype=q.dtype)
    V = np.zeros(q.shape[:-2] + (m, v.shape[-1]), dtype=q.dtype)
    o = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=q.dtype)
    for t in range(T):
        w = write[..., t, :, None]
        if decay is None:
            K = K + w * k[..., t, None, :]
            V = V + w * v[..., t, None, :]
        else:
            a = decay[..., t, :, None]
            K = a * K + w * k[..., t, None, :]
            V = a * V + w * v[..., t, None, :]
        scores = np.einsum("...md,...d->...m", K, q[..., t, :])
        o[..., t, :] = np.einsum("...md,...m->...d", V, link_fwd(link, scores))
    return o, GsaState(K, V)


def abc_recurrent(q, k, v, phi, link: str = "softmax"):
    """Additive slot writes with strengths ``phi``; read through softmax over slots."""
    o, _ = _slot_recurrent(q, k, v, None, phi, link)
    return o


def gsa_recurrent(q, k, v, log_gate, write=None, link: str = "softmax"):
    """Gated slot recurrence; ``write=None`` couples write strength to ``1 - alpha``."""
    g = clamp_log_gate(log_gate)
    alpha = np.exp(g)
    if write is None:
        write = -np.expm1(g)
    return _slot_recurrent(q, k, v, alpha, write, link)


def gsa_recurrent_bwd(q, k, v, log_gate, do, write=None, link: str = "softmax", segment: int = 64):
    """Backpropagation through time for ``gsa_recurrent``.

    Slot memories are checkpointed every ``segment`` steps and rebuilt segment by
    segment on the way back.  Returns ``(dq, dk, dv, dlog_gate, dwrite)``; with a
    coupled write strength the ``1 - alpha`` path is folded into ``dlog_gate`` and
    ``dwrite`` is ``None``.
    """
    coupled = write is None
    g = clamp_log_gate(log_gate)
    alpha = np.exp(g)
    w = -np.expm1(g) if coupled else write
    T = q.shape[-2]
    m = w.shape[-1]
    batch = q.shape[:-2]
    dk_, dv_ = k.shape[-1], v.shape[-1]

    # forward sweep storing segment-boundary memories
    bounds = list(range(0, T, segment))
    ckpt = []
    K = np.zeros(batch + (m, dk_), dtype=q.dtype)
    V = np.zeros(batch + (m, dv_), dtype=q.dtype)
    for s in bounds:
        ckpt.append((K, V))
        for t in range(s, min(s + segment, T)):
            a, ww = alpha[..., t, :, None], w[..., t, :, None]
            K = a * K + ww * k[..., t, None, :]
            V = a * V + ww * v[..., t, None, :]

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dalpha = np.zeros_like(alpha)
    dw = np.zeros_like(w)
    dK = np.zeros(batch + (m, dk_), dtype=q.dtype)
    dV = np.zeros(batch + (m, dv_), dtype=q.dtype)
    for si in range(len(bounds) - 1, -1, -1):
        s, e = bounds[si], min(bounds[si] + segment, T)
        K, V = ckpt[si]
        Ks, Vs = [K], [V]
        for t in range(s, e):
            a, ww = alpha[..., t, :, None], w[..., t, :, None]
            K = a * K + ww * k[..., t, None, :]
            V = a * V + ww * v[..., t, None, :]
            Ks.append(K)
            Vs.append(V)
        for t in range(e - 1, s - 1, -1):
            K, V = Ks[t - s + 1], Vs[t - s + 1]
            Kp, Vp = Ks[t - s], Vs[t - s]
            scores = np.einsum("...md,...d->...m", K, q[..., t, :])
            p = link_fwd(link, scores)
            dV = dV + p[..., :, None] * do[..., t, None, :]
            dp = np.einsum("...md,...d->...m", V, do[..., t, :])
            ds = link_bwd(link, scores, p, dp)
            dK = dK + ds[..., :, None] * q[..., t, None, :]
            dq[..., t, :] = np.einsum("...md,...m->...d", K, ds)
            wt = w[..., t, :]
            dk[..., t, :] = np.einsum("...md,...m->...d", dK, wt)
            dv[..., t, :] = np.einsum("...md,...m->...d", dV, wt)
            dw[..., t, :] = np.einsum("...md,...d->...m", dK, k[..., t, :]) + np.einsum(
                "...md,...d->...m", dV, v[..., t, :])
            dalpha[..., t, :] = (dK * Kp).sum(-1) + (dV * Vp).sum(-1)
            a = alpha[..., t, :, None]
            dK = a * dK
            dV = a * dV
    dlog = dalpha * alpha
    if coupled:
        dlog = dlog - dw * alpha
        dw = None
    dlog = np.where(log_gate < clamp_log_gate(log_gate), 0.0, dlog).astype(q.dtype)
    return dq, dk, dv, dlog, dw
