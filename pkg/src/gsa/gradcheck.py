"""Central finite-difference checks of the analytic backward passes.

The error reported for a tensor is ``max|analytic - numeric| / max|numeric|``
over the checked coordinates, so it is insensitive to coordinates whose true
gradient is (close to) zero.  Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .kernels import KernelInput, gsa_bwd, gsa_fwd
from .kernels.types import ChunkSpec
from .model import ModelConfig, cross_entropy, gsa_layer_bwd, gsa_layer_fwd, init_params, loss_and_grads, model_fwd
from .tensor import ConfigError, Rng

EPS = 1e-5
TOLERANCE = {"kernel": 1e-4, "layer": 1e-4, "model": 1e-3}


@dataclass
class TensorCheck:
    name: str
    error: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class CheckResult:
    scope: str
    seed: int
    tensors: list[TensorCheck]

    @property
    def worst(self) -> TensorCheck:
        return max(self.tensors, key=lambda t: t.error)

    def passed(self, tol: float | None = None) -> bool:
        return self.worst.error <= (TOLERANCE[self.scope] if tol is None else tol)


KINK_RATIO = 1e-3  # relative change of the central difference under a 100x smaller step that signals a kink
MIN_EPS = 1e-9


def _central(f, x, i, h) -> float:
    old = x[i]
    x[i] = old + h
    fp = f()
    x[i] = old - h
    fm = f()
    x[i] = old
    return (fp - fm) / (2 * h)


def numeric_grad(f: Callable[[], float], x: np.ndarray, coords, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place) at ``coords``.

    Piecewise links (relu, relu2) can put a kink within ``eps`` of the evaluation point, where the
    central difference averages two different slopes.  A coordinate whose estimate moves by more than
    ``KINK_RATIO`` (beyond its rounding noise) when the step shrinks 100x is re-measured with ever
    smaller steps (down to ``MIN_EPS``) until it settles; smooth coordinates keep the ``eps`` estimate.
    """
    out = np.empty(len(coords))
    scale = 8 * np.finfo(np.float64).eps * max(abs(f()), 1.0)
    for n, i in enumerate(coords):
        h, est = eps, _central(f, x, i, eps)
        while h / 100 >= MIN_EPS:
            finer = _central(f, x, i, h / 100)
            if abs(finer - est) <= KINK_RATIO * max(abs(est), abs(finer)) + scale / (h / 100):
                break
            h, est = h / 100, finer
        out[n] = est
    return out


def _coords(shape, rng: Rng, limit: int | None):
    total = int(np.prod(shape))
    flat = np.arange(total) if limit is None or limit >= total else np.sort(rng.permutation(total)[:limit])
    return [np.unravel_index(i, shape) for i in flat]


def compare(name, analytic: np.ndarray, f, x: np.ndarray, rng: Rng, limit: int | None = None) -> TensorCheck:
    coords = _coords(x.shape, rng, limit)
    num = numeric_grad(f, x, coords)
    ana = np.array([analytic[i] for i in coords])
    diff = np.abs(ana - num)
    scale = np.abs(num).max()
    err = float(diff.max() / scale) if scale > 0 else float(diff.max())
    w = int(diff.argmax())
    return TensorCheck(name, err, tuple(int(c) for c in coords[w]), float(ana[w]), float(num[w]))


def check_kernel(T: int = 16, d: int = 4, m: int = 3, seed: int = 0, link: str = "softmax", chunk: int = 4,
                 coupled: bool = True, limit: int | None = None) -> CheckResult:
    """GSA kernel gradients w.r.t. q, k, v, log gates (and free write strengths when ``coupled`` is off)."""
    rng = Rng.for_stream(seed, 1)
    x = KernelInput.random(rng, T, d, d, m)
    q, k, v, g = x.q, x.k, x.v, x.log_gate
    write = None if coupled else rng.uniform((T, m), 0.1, 1.0)
    w = rng.normal((T, d))
    spec = ChunkSpec(chunk)

    def f():
        o, _ = gsa_fwd(q, k, v, g, write, spec, link)
        return float(np.sum(o * w))

    _, saved = gsa_fwd(q, k, v, g, write, spec, link)
    grads = gsa_bwd(q, k, v, g, w, saved, write, spec, link)
    checks = [compare(n, a, f, t, rng, limit) for n, a, t in
              (("q", grads.dq, q), ("k", grads.dk, k), ("v", grads.dv, v), ("log_gate", grads.dlog_gate, g))]
    if write is not None:
        checks.append(compare("write", grads.dwrite, f, write, rng, limit))
    return CheckResult("kernel", seed, checks)


def _f64(cfg: ModelConfig, init_std: float) -> ModelConfig:
    return replace(cfg, dtype="f64", init_std=init_std)


def check_layer(cfg: ModelConfig, T: int = 8, seed: int = 0, init_std: float = 0.3,
                limit: int | None = None) -> CheckResult:
    """One GSA token-mixing layer: gradients w.r.t. its input and every weight."""
    cfg = _f64(cfg, init_std)
    rng = Rng.for_stream(seed, 2)
    prefix = "blocks.0.gsa."
    p = {k: a for k, a in init_params(cfg, seed).items() if k.startswith(prefix)}
    x = rng.normal((T, cfg.dim))
    w = rng.normal((T, cfg.dim))

    def f():
        y, _ = gsa_layer_fwd(x, p, cfg, prefix)
        return float(np.sum(y * w))

    _, cache = gsa_layer_fwd(x, p, cfg, prefix)
    dx, grads = gsa_layer_bwd(cache, w, p, cfg, prefix)
    checks = [compare("x", dx, f, x, rng, limit)]
    checks += [compare(name, grads[name], f, p[name], rng, limit) for name in sorted(p)]
    return CheckResult("layer", seed, checks)


def check_model(cfg: ModelConfig, T: int = 8, seed: int = 0, batch: int = 2, init_std: float = 0.3,
                limit: int | None = None) -> CheckResult:
    """Full model with the masked cross-entropy loss; gradients w.r.t. every parameter."""
    cfg = _f64(cfg, init_std)
    rng = Rng.for_stream(seed, 3)
    params = init_params(cfg, seed)
    tokens = rng.integers(cfg.vocab, (batch, T))
    targets = rng.integers(cfg.vocab, (batch, T))
    targets[:, ::3] = -100

    def f():
        logits, _ = model_fwd(tokens, params, cfg)
        return cross_entropy(logits, targets)[0]

    _, _, grads = loss_and_grads(tokens, targets, params, cfg)
    checks = [compare(name, grads[name], f, params[name], rng, limit) for name in sorted(params)]
    return CheckResult("model", seed, checks)


def parse_dims(text: str) -> dict[str, int]:
    """``"T=16,d=4,m=3"`` -> ``{"T": 16, "d": 4, "m": 3}``."""
    out = {}
    for part in filter(None, (s.strip() for s in text.split(","))):
        key, sep, val = part.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {part!r}")
        try:
            out[key.strip()] = int(val)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {val!r}") from None
    return out


def run_scope(scope: str, dims: dict[str, int], seed: int, link: str = "softmax",
              gate_mode: str = "data-dependent") -> CheckResult:
    known = {"kernel": {"T", "d", "m", "C"}, "layer": {"T", "d", "H", "m", "C"},
             "model": {"L", "d", "H", "m", "V", "T", "C"}}
    if scope not in known:
        raise ConfigError(f"unknown scope {scope!r}")
    extra = set(dims) - known[scope]
    if extra:
        raise ConfigError(f"unknown dims for scope {scope}: {sorted(extra)}")
    T = dims.get("T", 16 if scope == "kernel" else 8)
    if scope == "kernel":
        return check_kernel(T, dims.get("d", 4), dims.get("m", 3), seed, link, dims.get("C", 4))
    cfg = ModelConfig(layers=dims.get("L", 1 if scope == "layer" else 2), dim=dims.get("d", 16),
                      heads=dims.get("H", 2), slots=dims.get("m", 4), vocab=dims.get("V", 32),
                      chunk_size=dims.get("C", 4), link=link, gate_mode=gate_mode)
    if scope == "layer":
        return check_layer(cfg, T, seed)
    return check_model(cfg, T, seed)
