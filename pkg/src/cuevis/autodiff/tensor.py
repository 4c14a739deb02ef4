"""Tensor type and the reverse-mode backward pass.

Every operation that touches a tensor requiring gradients appends a node to an
implicit graph: the output remembers its inputs and a closure mapping the
upstream gradient to one gradient per input. Node ids come from a global
counter, so sorting reachable nodes by id gives the insertion order, and
walking it backwards is a valid reverse topological order.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_node_ids = itertools.count()
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference only)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """n-dimensional float array with an optional gradient slot.

    Parameters
    ----------
    data : array_like
        Values. Integer input is promoted to float64.
    requires_grad : bool
        Leaf tensors with this flag receive ``grad`` after :func:`backward`.
    dtype : numpy dtype, optional
        Cast ``data`` to this dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "inputs", "backward_fn", "node_id")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.inputs: tuple = ()
        self.backward_fn: Optional[Callable] = None
        self.node_id = next(_node_ids)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat view of the values."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __float__(self) -> float:
        return self.item()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # -- operator sugar (implemented in ops) -------------------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, key):
        return _ops().getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    @property
    def T(self):
        return _ops().transpose(self, None)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"only size-1 tensors convert to scalars, got shape {t.shape}")


def _ops():
    from cuevis.autodiff import ops

    return ops


def make_node(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result; record it in the graph when any input needs grad."""
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.inputs = tuple(inputs)
        out.backward_fn = backward_fn
        out.op = op
    else:
        out.op = op
    return out


@dataclass
class Graph:
    """Nodes reachable from a root, in insertion order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        seen = {root.node_id: root}
        stack = [root]
        while stack:
            node = stack.pop()
            for parent in node.inputs:
                if parent.requires_grad and parent.node_id not in seen:
                    seen[parent.node_id] = parent
                    stack.append(parent)
        return cls(nodes=[seen[k] for k in sorted(seen)])

    def free(self) -> None:
        for node in self.nodes:
            if node.backward_fn is not None:
                node.inputs = ()
                node.backward_fn = None


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients add onto whatever the leaves already hold, so calling this on
    several graphs without zeroing in between sums their gradients. The graph
    is released afterwards.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    graph = Graph.trace(root)
    seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=root.dtype).reshape(root.shape)
    pending = {root.node_id: seed}
    for node in reversed(graph.nodes):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        input_grads = node.backward_fn(g)
        for parent, pg in zip(node.inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(
                    f"{node.op}: gradient shape {pg.shape} does not match input shape {parent.shape}"
                )
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg
    graph.free()
