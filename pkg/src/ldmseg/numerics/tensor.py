"""Tensor, Parameter and the reverse-mode sweep."""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


class GraphError(RuntimeError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def finite_checks_enabled() -> bool:
    return getattr(_state, "check_finite", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything for backward."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    prev = finite_checks_enabled()
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


class Tensor:
    """Immutable n-d array node.

    ``_backward`` maps the upstream gradient to a tuple of gradients, one per
    parent (``None`` where a parent needs nothing).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents: Sequence["Tensor"] = (),
                 _backward: Callable | None = None, op: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.data.flags.writeable = False
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; the kernels live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes)


class Parameter(Tensor):
    """Leaf tensor owned by a module; the optimizer is its only writer."""

    __slots__ = ("trainable", "name")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        super().__init__(np.array(data, copy=True), requires_grad=trainable)
        self.trainable = trainable
        self.name = name
        self.grad = np.zeros_like(self.data)

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ValueError(f"assign: shape {value.shape} != {self.data.shape}")
        self.data = value.copy()
        self.data.flags.writeable = False

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.data.flags.writeable = False
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap a kernel result; attaches ``backward`` only when something upstream needs it."""
    if finite_checks_enabled() and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every trainable Parameter reachable from ``loss``.

    The graph is released afterwards; a second call on the same loss raises.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor produced by a computation")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if isinstance(loss, Parameter):
        if loss.trainable:
            loss.grad = loss.grad + np.ones_like(loss.data)
        return
    if loss._backward is None:
        if loss.op == "consumed":
            raise GraphError("graph already consumed by a previous backward call")
        if not loss.op:
            raise GraphError("loss was not produced by evaluating a computation")
        return  # constant w.r.t. every parameter

    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            if node.trainable:
                node.grad = node.grad + g
            continue
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise GraphError(f"{node.op}: gradient shape {pg.shape} != {p.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if not isinstance(node, Parameter):
            node._parents = ()
            node._backward = None
            node.op = "consumed"


def parameters_of(objs: Iterable) -> list[Parameter]:
    return [p for p in objs if isinstance(p, Parameter)]
