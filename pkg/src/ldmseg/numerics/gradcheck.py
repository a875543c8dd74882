"""Finite-difference checks of the analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, backward, no_grad


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Parameter]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    backward(fn())
    return [p.grad.copy() for p in params]


def grad_check(fn: Callable[[], Tensor], params: Sequence[Parameter], step: float = 1e-5,
               max_coords: int | None = 32, rng: np.random.Generator | None = None,
               refine_step: float | None = None) -> float:
    """Max relative error between backward and central differences.

    ``fn`` rebuilds the scalar loss from the current parameter values.  Up to
    ``max_coords`` coordinates per parameter are sampled (all if None).
    Error per coordinate is |a - fd| / max(|a|, |fd|, 1e-8).

    With ``refine_step``, a coordinate whose error exceeds 1e-6 is re-estimated by Richardson
    extrapolation of central differences at ``refine_step`` and half of it (the h^2 term cancels),
    and that estimate is used instead.  A larger step keeps roundoff small next to tiny
    gradients of an O(1) loss.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {p.name or p} is {p.dtype}")
    rng = rng if rng is not None else np.random.default_rng(0)
    grads = analytic_grads(fn, params)
    worst = 0.0
    for p, g in zip(params, grads):
        if not p.trainable:
            continue
        size = p.data.size
        if max_coords is None or size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        base = p.data.copy()
        for idx in coords:
            a = float(g.reshape(-1)[idx])
            fd = _central(fn, p, base, int(idx), step)
            err = _rel(a, fd)
            if refine_step is not None and err > 1e-6:
                coarse = _central(fn, p, base, int(idx), refine_step)
                fine = _central(fn, p, base, int(idx), refine_step / 2)
                err = _rel(a, (4.0 * fine - coarse) / 3.0)
            worst = max(worst, err)
    return worst


def _rel(a: float, fd: float) -> float:
    return abs(a - fd) / max(abs(a), abs(fd), 1e-8)


def _central(fn, p: Parameter, base: np.ndarray, idx: int, step: float) -> float:
    flat = base.reshape(-1).copy()
    flat[idx] = base.reshape(-1)[idx] + step
    p.assign(flat.reshape(base.shape))
    with no_grad():
        up = fn().item()
    flat[idx] = base.reshape(-1)[idx] - step
    p.assign(flat.reshape(base.shape))
    with no_grad():
        down = fn().item()
    p.assign(base)
    return (up - down) / (2 * step)


def input_grad_check(fn: Callable[[Parameter], Tensor], x: np.ndarray, step: float = 1e-5,
                     max_coords: int | None = 32, rng: np.random.Generator | None = None) -> float:
    """grad_check w.r.t. an input array, wrapped as a temporary Parameter."""
    p = Parameter(np.asarray(x, dtype=np.float64), name="input")
    return grad_check(lambda: fn(p), [p], step=step, max_coords=max_coords, rng=rng)
