"""Adaptive-moment and plain gradient updates with global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0
    kind: str = "adam"

    def __post_init__(self):
        if self.lr <= 0 or self.clip <= 0:
            raise ValueError("learning rate and clip norm must be > 0")
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_by_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if not np.isfinite(total):
        raise FloatingPointError("non-finite gradient")
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def optimizer_step(params, grads, cfg, state):
    """Update ``params`` (name -> ndarray, modified in place) from ``grads``.

    Names missing from ``grads`` are left untouched.  Returns the
    pre-clipping gradient norm.
    """
    grads, norm = clip_by_global_norm(grads, cfg.clip)
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        if cfg.kind == "sgd":
            p -= cfg.lr * g
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        p -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return norm
