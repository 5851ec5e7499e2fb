"""Dense tensor with a tape-style reverse-mode autodiff graph.

Every differentiable op builds its output through :func:`make_result`, which
records the parents and a backward closure. The graph is rebuilt on every
forward pass and walked once by :meth:`Tensor.backward`.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from etcseg.errors import NumericError, UsageError

DTYPE = np.float64

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, 'enabled', True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """N-dimensional float64 array participating in an autodiff graph"""

    __slots__ = ('data', 'requires_grad', 'grad', 'name', '_parents', '_backward')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- array-like accessors -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data"""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward -------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``"""
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() without a seed needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}

        for node in reversed(_topological_order(self)):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node._backward(node_grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        from etcseg.autodiff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from etcseg.autodiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from etcseg.autodiff import ops
        return ops.sub(as_tensor(other), self)

    def __mul__(self, other):
        from etcseg.autodiff import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from etcseg.autodiff import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from etcseg.autodiff import ops
        return ops.div(as_tensor(other), self)

    def __neg__(self):
        from etcseg.autodiff import ops
        return ops.mul(self, -1.0)

    def __pow__(self, exponent):
        from etcseg.autodiff import ops
        return ops.pow(self, exponent)


Scalar = Union[int, float]
TensorLike = Union[Tensor, np.ndarray, Scalar]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_result(
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op_name: str,
) -> Tensor:
    """Wrap an op's forward output and attach it to the graph"""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op_name} produced non-finite values", {'op': op_name})
    parents = tuple(parents)
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order
