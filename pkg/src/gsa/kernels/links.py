"""Nonlinearities applied to the slot scores between the two passes."""

from __future__ import annotations

import numpy as np

from ..tensor import ConfigError, softmax_rows, softmax_rows_bwd, swish, swish_bwd

LINKS = ("softmax", "swish", "relu", "relu2", "identity")


def check_link(link: str) -> str:
    if link not in LINKS:
        raise ConfigError(f"unknown link {link!r}; expected one of {LINKS}")
    return link


def link_fwd(link: str, x: np.ndarray) -> np.ndarray:
    if link == "softmax":
        return softmax_rows(x)
    if link == "swish":
        return swish(x)
    if link == "relu":
        return np.maximum(x, 0).astype(x.dtype, copy=False)
    if link == "relu2":
        r = np.maximum(x, 0).astype(x.dtype, copy=False)
        return r * r
    if link == "identity":
        return x
    raise ConfigError(f"unknown link {link!r}; expected one of {LINKS}")


def link_bwd(link: str, x: np.ndarray, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``x`` given forward input ``x`` and output ``y``."""
    if link == "softmax":
        return softmax_rows_bwd(y, dy)
    if link == "swish":
        return swish_bwd(x, dy)
    if link == "relu":
        return np.where(x > 0, dy, 0).astype(dy.dtype, copy=False)
    if link == "relu2":
        return np.where(x > 0, 2 * x * dy, 0).astype(dy.dtype, copy=False)
    if link == "identity":
        return dy
    raise ConfigError(f"unknown link {link!r}; expected one of {LINKS}")

