"""Adam with bias correction, written as a pure function over named arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None):
    """One Adam update.

    ``params`` and ``grads`` map names to arrays.  Returns new
    ``(params, state)``; the inputs are left untouched.  ``lr`` overrides the
    state's rate for this step (used by schedules).
    """
    lr = state.lr if lr is None else lr
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads.get(name, np.zeros_like(p)), dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"adam: gradient shape {g.shape} differs from parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = np.zeros_like(p) if m is None else m
        v = np.zeros_like(p) if v is None else v
        if m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"adam: moment shape differs from parameter {name} {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return new_params, new_state
