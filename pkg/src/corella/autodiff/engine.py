"""Graph nodes and the reverse pass."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class AutodiffError(Exception):
    """Base class for errors raised by the differentiation core."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


class GraphError(AutodiffError, RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Build no graph inside this block; results are plain constant nodes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """A value in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; everything
    produced by an op remembers its parents and a closure that pushes the
    output gradient back to them.
    """

    __slots__ = (
        "_values", "grad", "op", "parents", "requires_grad", "name",
        "_backward", "_version", "_parent_versions", "_consumed",
    )

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 op: str = "leaf", parents: Sequence["Node"] = ()):
        self._values = np.asarray(values, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.name = name
        self._backward: Callable[[np.ndarray], None] | None = None
        self._version = 0
        self._parent_versions = tuple(p._version for p in self.parents)
        self._consumed = False

    # values are versioned so backward can detect mutation after forward
    @property
    def values(self) -> np.ndarray:
        return self._values

    @values.setter
    def values(self, new):
        new = np.asarray(new, dtype=DTYPE)
        if new.shape != self._values.shape:
            raise ShapeError("assign", self._values.shape, new.shape)
        self._values = new
        self._version += 1

    @property
    def shape(self) -> tuple[int, ...]:
        return self._values.shape

    @property
    def ndim(self) -> int:
        return self._values.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self._values)

    def numpy(self) -> np.ndarray:
        return self._values

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    def backward(self):
        backward(self)

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Node):
            return ops.mul(self, ops.power(other, -1.0))
        return ops.mul(self, 1.0 / other)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def make_result(values: np.ndarray, op: str, parents: Iterable[Node],
                backward_fn: Callable[[np.ndarray], None]) -> Node:
    """Wrap an op's output, checking finiteness and wiring the backward closure."""
    values = np.asarray(values, dtype=DTYPE)
    if not np.isfinite(values).all():
        raise NonFiniteError(op)
    parents = tuple(parents)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Node(values, op=op)
    out = Node(values, requires_grad=True, op=op, parents=parents)
    out._backward = backward_fn
    return out


def accumulate(node: Node, g: np.ndarray):
    if not node.requires_grad:
        return
    if g.shape != node.shape:
        raise ShapeError(f"grad-accumulate[{node.op}]", node.shape, g.shape)
    if node.grad is None:
        node.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        node.grad += g


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node):
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.shape != ():
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("root does not depend on any parameter")
    if root._consumed:
        raise GraphError("backward already ran on this graph; rebuild it first")
    order = _topo_order(root)
    for node in order:
        for p, v in zip(node.parents, node._parent_versions):
            if p._version != v:
                raise GraphError(
                    f"input of {node.op} was modified after the forward pass")
    interior = [n for n in order if n.parents]
    for n in interior:
        n.grad = None
    root.grad = np.ones((), dtype=DTYPE)
    for node in reversed(order):
        if node.parents and node.grad is not None:
            node._backward(node.grad)
    for n in interior:
        n._consumed = True
        n._backward = None
