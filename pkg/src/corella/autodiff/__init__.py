"""Minimal reverse-mode differentiation over float64 numpy arrays."""

from .engine import (
    AutodiffError, GraphError, Node, NonFiniteError, ShapeError, as_node, backward,
    grad_enabled, no_grad,
)
from .gradcheck import grad_check
from .ops import OPS, DomainError
from .optim import Adam
from .rng import ALGORITHM as RNG_ALGORITHM, make_rng
from . import ops

__all__ = [
    "Adam", "AutodiffError", "DomainError", "GraphError", "Node", "NonFiniteError",
    "OPS", "RNG_ALGORITHM", "ShapeError", "as_node", "backward", "grad_check",
    "grad_enabled", "make_rng", "no_grad", "ops", "parameter",
]


def parameter(values, name: str | None = None) -> Node:
    return Node(values, requires_grad=True, name=name)
