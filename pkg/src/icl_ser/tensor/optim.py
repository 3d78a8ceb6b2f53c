"""Rectified Adam and the warm-up learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Tensor
from .ops import NonFiniteError


@dataclass
class RAdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @property
    def rho_inf(self) -> float:
        return 2.0 / (1.0 - self.beta2) - 1.0

    def rho(self, t: int) -> float:
        b2t = self.beta2 ** t
        return self.rho_inf - 2.0 * t * b2t / (1.0 - b2t)


def radam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray | None],
    state: RAdamState,
    lr: float | None = None,
) -> None:
    """Apply one RAdam update in place to ``params`` and ``state``.

    While the variance-rectification term is at most 4 the update falls back
    to bias-corrected momentum; otherwise the rectified adaptive step is used.
    A ``None`` gradient is treated as zero. Non-finite gradients reject the
    whole update and leave params and state untouched.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i} at step {state.step + 1}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, m in zip(params, state.m):
        if p.shape != m.shape:
            raise ValueError(f"parameter shape {p.shape} does not match moment shape {m.shape}")

    lr = state.learning_rate if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    rho_t = state.rho(t)
    rectified = rho_t > 4.0
    if rectified:
        rho_inf = state.rho_inf
        r = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
        bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        if rectified:
            p -= lr * r * m_hat / (np.sqrt(v / bc2) + state.epsilon)
        else:
            p -= lr * m_hat


class RAdam:
    """Optimizer over a fixed list of parameter tensors."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = RAdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        radam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr)


def warmup_constant(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warm-up to ``base_lr`` over ``warmup_steps`` updates, then constant."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)
