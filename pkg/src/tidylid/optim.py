"""AdamW with decoupled weight decay and a per-step cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradient, OutOfRange, ShapeMismatch


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    total_steps: int = 1

    def __post_init__(self):
        if self.lr0 <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr0 and eps must be positive, weight_decay non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def cosine_lr(step: int, cfg: OptimConfig) -> float:
    """lr0 * (1 + cos(pi * step / total_steps)) / 2, annealed to zero."""
    if not 0 <= step <= cfg.total_steps:
        raise OutOfRange(f"step {step} outside [0, {cfg.total_steps}]")
    return max(0.0, cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * step / cfg.total_steps)))


def adamw_step(params: dict, grads: dict, state: OptimState, cfg: OptimConfig, lr: float):
    """Update ``params`` in place for every name present in ``grads``.

    ``p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)``; with a zero
    gradient the moments stay at zero and only the decay factor acts.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if name not in params or params[name].shape != np.shape(g):
            raise ShapeMismatch(f"gradient {name!r} does not match a parameter")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=p.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        params[name] = (p * (1.0 - lr * cfg.weight_decay) - lr * update).astype(p.dtype)
    return params, state
