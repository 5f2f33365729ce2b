"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, parameter


class ProbeError(ValueError):
    """The checked function is not finite at a probe point."""


def analytic_grad(f: Callable[..., Tensor], point: Sequence[np.ndarray]) -> list[np.ndarray]:
    params = [parameter(np.array(p, dtype=np.float64, copy=True)) for p in point]
    with Tape() as tape:
        loss = f(*params)
    grads = tape.backward(loss, params)
    return [grads[p] for p in params]


def _value(f, arrays) -> float:
    out = f(*[Tensor(a) for a in arrays])
    val = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(-1)[0])
    if not np.isfinite(val):
        raise ProbeError("function value is not finite at a probe point")
    return val


def numeric_grad(f: Callable[..., Tensor], point: Sequence[np.ndarray], step: float = 1e-5) -> list[np.ndarray]:
    arrays = [np.array(p, dtype=np.float64, copy=True) for p in point]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = _value(f, arrays)
            flat[i] = orig - step
            lo = _value(f, arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        out.append(g)
    return out


def grad_check(f: Callable[..., Tensor], point: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1e-8, |central|)``.

    ``f`` takes one Tensor per entry of ``point`` and returns a scalar Tensor.
    """
    if isinstance(point, np.ndarray) or np.isscalar(point):
        point = [np.asarray(point, dtype=np.float64)]
    _value(f, [np.asarray(p, dtype=np.float64) for p in point])
    return relative_error(analytic_grad(f, point), numeric_grad(f, point, step))


def relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for a, c in zip(analytic, numeric):
        if np.size(a):
            err = np.abs(a - c) / np.maximum(1e-8, np.abs(c))
            worst = max(worst, float(err.max()))
    return worst
