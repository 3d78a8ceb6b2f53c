"""Central finite-difference check of autodiff gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .core import Tensor
from .ops import NonFiniteError


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5) -> float:
    """Max over coordinates of ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.

    ``f`` maps a tensor to a scalar tensor; it is re-evaluated twice per
    coordinate, so it must be deterministic.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteError("f(x) is not finite")
    if y.data.size != 1:
        raise ValueError(f"f must return a scalar, got shape {y.shape}")
    y.backward()
    g_ad = np.zeros_like(x0) if xt.grad is None else xt.grad

    def value(arr: np.ndarray) -> float:
        return float(f(Tensor(arr)).data)

    g_fd = np.empty_like(x0)
    flat = x0.reshape(-1)
    out = g_fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value(x0)
        flat[i] = orig - h
        down = value(x0)
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    if not np.all(np.isfinite(g_fd)):
        raise NonFiniteError("finite differences are not finite")
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if x0.size else 0.0
