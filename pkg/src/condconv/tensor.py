"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays in NHWC layout for images (batch, height, width,
channels). Every differentiable operation builds a node in an acyclic graph;
``Tensor.backward`` walks the graph in reverse topological order and
accumulates gradients into ``.grad``.

Precision is a build-wide setting: training and analysis run in float32,
gradient checking switches to float64 (see ``precision``).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "inference_mode",
    "grad_enabled",
    "gradients",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible. No silent broadcasting."""


_state = threading.local()


def _dtype_stack():
    if not hasattr(_state, "dtype_stack"):
        _state.dtype_stack = [np.float32]
    return _state.dtype_stack


def default_dtype():
    """The floating dtype new tensors are created with."""
    return _dtype_stack()[-1]


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _dtype_stack()[-1] = dt.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype, e.g. ``with precision('float64')``."""
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _dtype_stack().append(dt.type)
    try:
        yield
    finally:
        _dtype_stack().pop()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def inference_mode():
    """Disable graph recording; forward passes allocate no op-records."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# Backward functions receive the output gradient and return one gradient
# array (or None) per parent, in parent order.
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """A dense array plus its op-record in the autodiff graph.

    ``data`` is a row-major numpy array, ``grad`` is lazily materialized with
    the same shape. Leaf tensors created with ``requires_grad=True`` are the
    trainable parameters; everything else is an intermediate node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple["Tensor", ...] = ()
        self._backward_fn: Optional[BackwardFn] = None
        self.op = ""

    @classmethod
    def result(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward_fn: BackwardFn,
        op: str = "",
    ) -> "Tensor":
        """Wrap an op result, recording its parents when grad is enabled."""
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = needs
        out.op = op
        if needs:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    # ------------------------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag}, op={self.op!r})"

    # ------------------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output.

        Populates ``.grad`` on every reachable tensor with
        ``requires_grad=True``. Rejects non-scalar roots.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative DFS; deep graphs would blow the recursion limit
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is None or node.grad is None:
                continue
            parent_grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise ShapeError(
                        f"gradient shape {g.shape} does not match value shape "
                        f"{parent.data.shape} in op {node.op!r}"
                    )
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad += g

    def grad_array(self) -> np.ndarray:
        """Gradient as an array; zeros if this tensor was never reached."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad


def gradients(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Run ``loss.backward()`` and collect one gradient per parameter.

    Parameters not reachable from the loss get an all-zero gradient.
    """
    for p in params:
        p.zero_grad()
    loss.backward()
    return [p.grad_array() for p in params]


def check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
