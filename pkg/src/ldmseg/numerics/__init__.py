"""Dense tensors with reverse-mode differentiation on top of numpy."""
from __future__ import annotations

import contextlib
import os

from . import ops
from .gradcheck import analytic_grads, grad_check, input_grad_check
from .module import Module, init_weight
from .tensor import (GraphError, NonFiniteError, Parameter, Tensor, backward, finite_checks,
                     grad_enabled, no_grad)

DETERMINISTIC_ENV = "LDMSEG_DETERMINISTIC"


def deterministic_requested() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "").strip().lower() in {"1", "true", "yes", "on"}


@contextlib.contextmanager
def deterministic(enabled: bool = True):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def evaluate(fn, *args, **kwargs) -> Tensor:
    """Run a computation; the returned Tensor carries what backward needs."""
    return fn(*args, **kwargs)


__all__ = [
    "GraphError", "Module", "NonFiniteError", "Parameter", "Tensor", "analytic_grads",
    "backward", "deterministic", "deterministic_requested", "evaluate", "finite_checks",
    "grad_check", "grad_enabled", "init_weight", "input_grad_check", "no_grad", "ops",
]
