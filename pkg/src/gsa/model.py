"""GSA language model with hand-written backward passes.

Block layout (pre-norm residual)::

    h   = x + GSA(RMSNorm(x))
    out = h + GLU(RMSNorm(h))

Token mixing per head: ``q, k, v = swish(x W)``, ``alpha = sigmoid(x W_alpha)^(1/tau)``,
``o = GSA(q, k, v, alpha)`` and ``y = RMSNorm(swish(concat(o))) W_o``.
Parameters are kept in a flat ``dict[str, ndarray]`` so the optimizer,
checkpointing and gradient checks can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import ChunkSpec, abc_write_strengths, abc_write_strengths_bwd, check_link, gsa_bwd, gsa_fwd
from .tensor import ConfigError, Rng, logsigmoid, resolve_dtype, sigmoid, swish_bwd

GATE_MODES = ("data-dependent", "data-independent", "none")
NORM_EPS = 1e-6
IGNORE_INDEX = -100


@dataclass
class ModelConfig:
    layers: int = 2
    dim: int = 128
    heads: int = 2
    slots: int = 32
    vocab: int = 34
    seq_len_max: int = 512
    tau: float = 8.0
    link: str = "softmax"
    gate_mode: str = "data-dependent"
    # fixed per-slot decay used by gate_mode="data-independent"
    decay: float = 2.0 ** (-1.0 / 8.0)
    glu_expansion: float = 8.0 / 3.0
    chunk_size: int = 64
    recompute: bool = True
    dtype: str = "f32"
    init_std: float = 0.05
    # spread of the gate logits W_alpha^T x at unit-RMS input; wide enough that slots start with distinct decay rates
    gate_logit_std: float = 8.0

    def __post_init__(self):
        for name in ("layers", "dim", "heads", "slots", "vocab", "seq_len_max", "chunk_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if not (self.init_std > 0 and self.gate_logit_std > 0):
            raise ConfigError("init_std and gate_logit_std must be > 0")
        if self.tau < 1:
            raise ConfigError(f"tau must be >= 1, got {self.tau}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"unknown gate mode {self.gate_mode!r}; expected one of {GATE_MODES}")
        if not 0.0 < self.decay < 1.0:
            raise ConfigError("decay must lie in (0, 1)")
        check_link(self.link)
        resolve_dtype(self.dtype)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def glu_hidden(self) -> int:
        return max(8, int(round(self.glu_expansion * self.dim / 8.0)) * 8)

    @property
    def np_dtype(self):
        return resolve_dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def gsa_layer_param_count(dim: int, heads: int, slots: int) -> int:
    """Wq, Wk, Wv, Wo, W_alpha and the output-norm gain."""
    return 4 * dim * dim + dim * heads * slots + dim


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, e, V = cfg.dim, cfg.glu_hidden, cfg.vocab
    shapes = {"embedding": (V, d)}
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1": (d,),
            p + "gsa.wq": (d, d),
            p + "gsa.wk": (d, d),
            p + "gsa.wv": (d, d),
            p + "gsa.walpha": (d, cfg.heads * cfg.slots),
            p + "gsa.wo": (d, d),
            p + "gsa.norm": (d,),
            p + "norm2": (d,),
            p + "glu.w_gate": (d, e),
            p + "glu.w_up": (d, e),
            p + "glu.w_down": (e, d),
        })
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, V)
    return shapes


def is_gain(name: str) -> bool:
    return name.endswith("norm") or name.endswith("norm1") or name.endswith("norm2")


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = Rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if is_gain(name):
            params[name] = np.ones(shape, dtype=cfg.np_dtype)
        elif name.endswith("walpha"):
            params[name] = rng.normal(shape, 0.0, cfg.gate_logit_std / math.sqrt(cfg.dim), cfg.np_dtype)
        else:
            params[name] = rng.normal(shape, 0.0, cfg.init_std, cfg.np_dtype)
    return params


# ---------------------------------------------------------------------------
# building blocks


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _wgrad(x, dy):
    """Sum over all leading axes of x^T dy."""
    return _flat(x).T @ _flat(dy)


def rmsnorm(x, gain):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    return x * r * gain, r


def rmsnorm_bwd(x, gain, r, dy):
    dgain = _flat(dy * x * r).sum(0)
    dxh = dy * gain
    dx = r * (dxh - x * (r * r) * np.mean(dxh * x, axis=-1, keepdims=True))
    return dx, dgain


def glu(x, w_gate, w_up, w_down):
    a = x @ w_gate
    u = x @ w_up
    sa = sigmoid(a)
    h = a * sa * u
    return h @ w_down, (x, a, sa, u, h)


def glu_bwd(cache, w_gate, w_up, w_down, dy):
    x, a, sa, u, h = cache
    dw_down = _wgrad(h, dy)
    dh = dy @ w_down.T
    du = dh * (a * sa)
    da = swish_bwd(a, dh * u, sa)
    dx = da @ w_gate.T + du @ w_up.T
    return dx, _wgrad(x, da), _wgrad(x, du), dw_down


def gate_compute(z, tau):
    """log alpha for alpha = sigmoid(z)^(1/tau), evaluated in log space."""
    return logsigmoid(z) / tau


def gate_compute_bwd(z, tau, dlog_alpha):
    return dlog_alpha * sigmoid(-z) / tau


def _split(x, H):
    # [..., T, H*dh] -> [..., H, T, dh]
    return np.moveaxis(x.reshape(x.shape[:-1] + (H, -1)), -2, -3)


def _merge(x):
    # [..., H, T, dh] -> [..., T, H*dh]
    x = np.moveaxis(x, -3, -2)
    return x.reshape(x.shape[:-2] + (-1,))


@dataclass
class GsaLayerCache:
    x: np.ndarray
    pre_q: np.ndarray
    pre_k: np.ndarray
    pre_v: np.ndarray
    sig: list
    z: np.ndarray
    log_gate: np.ndarray
    write: np.ndarray | None
    saved: object
    oc: np.ndarray
    sig_o: np.ndarray
    normed: np.ndarray
    rinv: np.ndarray
    q: np.ndarray = field(repr=False, default=None)
    k: np.ndarray = field(repr=False, default=None)
    v: np.ndarray = field(repr=False, default=None)


def _gates(z, cfg: ModelConfig):
    if cfg.gate_mode == "data-dependent":
        return gate_compute(z, cfg.tau), None
    if cfg.gate_mode == "data-independent":
        return np.full(z.shape, math.log(cfg.decay), dtype=z.dtype), None
    # no decay; cumulative-softmax write strengths as in ABC
    return np.zeros_like(z), abc_write_strengths(z)


def gsa_layer_fwd(x, p: dict, cfg: ModelConfig, prefix: str = ""):
    """Multi-head GSA token mixing.  ``x`` is ``[..., T, d]``; returns ``(y, cache)``."""
    H = cfg.heads
    pre_q, pre_k, pre_v = x @ p[prefix + "wq"], x @ p[prefix + "wk"], x @ p[prefix + "wv"]
    sig = [sigmoid(a) for a in (pre_q, pre_k, pre_v)]
    q, k, v = (_split(a * s, H) for a, s in zip((pre_q, pre_k, pre_v), sig))
    z = _split(x @ p[prefix + "walpha"], H)
    log_gate, write = _gates(z, cfg)
    spec = ChunkSpec(cfg.chunk_size)
    o, saved = gsa_fwd(q, k, v, log_gate, write, spec, cfg.link, keep_states=not cfg.recompute)
    oc = _merge(o)
    sig_o = sigmoid(oc)
    normed, rinv = rmsnorm(oc * sig_o, p[prefix + "norm"])
    y = normed @ p[prefix + "wo"]
    cache = GsaLayerCache(x, pre_q, pre_k, pre_v, sig, z, log_gate, write, saved, oc, sig_o, normed, rinv,
                          q, k, v)
    return y, cache


def gsa_layer_bwd(cache: GsaLayerCache, dy, p: dict, cfg: ModelConfig, prefix: str = ""):
    """Returns ``(dx, grads)`` with grads keyed like ``p`` (prefix included)."""
    H = cfg.heads
    grads = {prefix + "wo": _wgrad(cache.normed, dy)}
    dn = dy @ p[prefix + "wo"].T
    s = cache.oc * cache.sig_o
    ds, grads[prefix + "norm"] = rmsnorm_bwd(s, p[prefix + "norm"], cache.rinv, dn)
    do = _split(swish_bwd(cache.oc, ds, cache.sig_o), H)
    g = gsa_bwd(cache.q, cache.k, cache.v, cache.log_gate, do, cache.saved, cache.write,
                ChunkSpec(cfg.chunk_size), cfg.link, recompute=cfg.recompute)
    if cfg.gate_mode == "data-dependent":
        dz = gate_compute_bwd(cache.z, cfg.tau, g.dlog_gate)
    elif cfg.gate_mode == "data-independent":
        dz = np.zeros_like(cache.z)
    else:
        dz = abc_write_strengths_bwd(cache.z, cache.write, g.dwrite)
    dz = _merge(dz)
    dpre = {
        "wq": swish_bwd(cache.pre_q, _merge(g.dq), cache.sig[0]),
        "wk": swish_bwd(cache.pre_k, _merge(g.dk), cache.sig[1]),
        "wv": swish_bwd(cache.pre_v, _merge(g.dv), cache.sig[2]),
    }
    dx = dz @ p[prefix + "walpha"].T
    grads[prefix + "walpha"] = _wgrad(cache.x, dz)
    for name, da in dpre.items():
        dx = dx + da @ p[prefix + name].T
        grads[prefix + name] = _wgrad(cache.x, da)
    return dx, grads


# ---------------------------------------------------------------------------
# full model


def model_fwd(tokens, params: dict, cfg: ModelConfig):
    """Token ids ``[..., T]`` to logits ``[..., T, V]`` plus the caches for ``model_bwd``."""
    tokens = np.asarray(tokens)
    if tokens.shape[-1] > cfg.seq_len_max:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds seq_len_max {cfg.seq_len_max}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError("token id out of range")
    x = params["embedding"][tokens]
    caches = {"tokens": tokens, "blocks": []}
    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        n1, r1 = rmsnorm(x, params[pre + "norm1"])
        a, gc = gsa_layer_fwd(n1, params, cfg, pre + "gsa.")
        h = x + a
        n2, r2 = rmsnorm(h, params[pre + "norm2"])
        f, fc = glu(n2, params[pre + "glu.w_gate"], params[pre + "glu.w_up"], params[pre + "glu.w_down"])
        caches["blocks"].append((x, r1, gc, h, r2, fc))
        x = h + f
    nf, rf = rmsnorm(x, params["final_norm"])
    logits = nf @ params["lm_head"]
    caches["final"] = (x, rf, nf)
    return logits, caches


def model_bwd(caches, dlogits, params: dict, cfg: ModelConfig) -> dict[str, np.ndarray]:
    grads = {}
    x, rf, nf = caches["final"]
    grads["lm_head"] = _wgrad(nf, dlogits)
    dx, grads["final_norm"] = rmsnorm_bwd(x, params["final_norm"], rf, dlogits @ params["lm_head"].T)
    for i in range(cfg.layers - 1, -1, -1):
        pre = f"blocks.{i}."
        xin, r1, gc, h, r2, fc = caches["blocks"][i]
        wg, wu, wd = params[pre + "glu.w_gate"], params[pre + "glu.w_up"], params[pre + "glu.w_down"]
        dn2, grads[pre + "glu.w_gate"], grads[pre + "glu.w_up"], grads[pre + "glu.w_down"] = glu_bwd(fc, wg, wu, wd, dx)
        dh_norm, grads[pre + "norm2"] = rmsnorm_bwd(h, params[pre + "norm2"], r2, dn2)
        dh = dx + dh_norm
        dn1, g = gsa_layer_bwd(gc, dh, params, cfg, pre + "gsa.")
        grads.update(g)
        dx_norm, grads[pre + "norm1"] = rmsnorm_bwd(xin, params[pre + "norm1"], r1, dn1)
        dx = dh + dx_norm
    demb = np.zeros_like(params["embedding"])
    np.add.at(demb, caches["tokens"].reshape(-1), _flat(dx))
    grads["embedding"] = demb
    return grads


def cross_entropy(logits, targets, ignore_index: int = IGNORE_INDEX):
    """Mean negative log-likelihood over non-ignored positions; returns ``(loss, dlogits)``."""
    targets = np.asarray(targets)
    mask = targets != ignore_index
    n = int(mask.sum())
    if n == 0:
        raise ValueError("every position is ignored; loss is undefined")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -float(picked[mask].sum()) / n
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, safe[..., None], np.take_along_axis(dlogits, safe[..., None], -1) - 1.0, -1)
    dlogits = dlogits * (mask[..., None] / n)
    return loss, dlogits.astype(logits.dtype, copy=False)


def loss_and_grads(tokens, targets, params, cfg: ModelConfig):
    logits, caches = model_fwd(tokens, params, cfg)
    loss, dlogits = cross_entropy(logits, targets)
    return loss, logits, model_bwd(caches, dlogits, params, cfg)
