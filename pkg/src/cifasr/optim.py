"""Adam with inverse-square-root warmup, and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ModelParams
from .tensor import ContractError


def noam_lr(step: int, base_lr: float, d_model: int, warmup: int) -> float:
    """``base_lr * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)``."""
    if step < 1:
        raise ValueError("step counts from 1")
    return base_lr * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


@dataclass
class AdamState:
    lr: float
    d_model: int
    warmup: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self, step: int | None = None) -> float:
        return noam_lr(step or max(self.t, 1), self.lr, self.d_model, self.warmup)


def adam_step(params: ModelParams, state: AdamState) -> float:
    """One Adam update on trainable parameters; clears all gradients.

    Moments are allocated lazily, so frozen parameters never get optimizer
    state. Returns the learning rate used.
    """
    trainable = [(n, t) for n, t in params.items() if t.requires_grad]
    missing = [n for n, t in trainable if t.grad is None]
    if missing:
        raise ContractError(f"no gradient for trainable parameter(s): {missing[:5]}")
    state.t += 1
    lr = noam_lr(state.t, state.lr, state.d_model, state.warmup)
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for name, p in trainable:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - (lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.data.dtype)
    params.zero_grad()
    return lr


def global_grad_norm(params: ModelParams) -> float:
    total = 0.0
    for t in params.tensors():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for t in params.tensors():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm
