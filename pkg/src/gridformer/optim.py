"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Parameter


def cosine_lr(step: int, total: int, lr_start: float = 3e-4, lr_end: float = 1e-6) -> float:
    """Cosine annealing from ``lr_start`` at step 0 to ``lr_end`` at ``total``."""
    if step >= total:
        return lr_end
    step = max(step, 0)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: list[Parameter],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One in-place AdamW update using each parameter's ``.grad``."""
    for p in params:
        if p.grad is None:
            raise ContractError(f"no gradient for parameter {p.path!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        g = p.grad
        m = state.m.get(p.path)
        if m is None:
            m = state.m[p.path] = np.zeros_like(p.data)
            state.v[p.path] = np.zeros_like(p.data)
        v = state.v[p.path]
        dt = p.data.dtype.type
        if weight_decay:
            p.data = p.data * dt(1.0 - lr * weight_decay)
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * g * g
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p.data = p.data - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
