"""Layer-wise hidden-state alignment between the two models and the weighted
training objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Node, ops
from .nn import ParamModule, glorot, linear


@dataclass
class AlignmentConfig:
    llm_layers: list[int] = field(default_factory=lambda: [1, 2])  # 1-based block indices
    crm_layers: list[int] = field(default_factory=lambda: [2, 3])  # 1-based cross layers
    exponent: float = 2.0
    projection_dim: int = 32

    def __post_init__(self):
        if len(self.llm_layers) != len(self.crm_layers) or not self.llm_layers:
            raise ValueError("llm_layers and crm_layers must be non-empty and equally long")
        if self.exponent <= 0:
            raise ValueError(f"align exponent must be > 0, got {self.exponent}")

    @property
    def pairs(self) -> int:
        return len(self.llm_layers)


class ProjectionHeads(ParamModule):
    """One fully-connected map per side and per aligned layer pair."""

    prefix = "align."

    def __init__(self, llm_dim: int, crm_dim: int, pairs: int, projection_dim: int = 32,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.llm_dim, self.crm_dim, self.projection_dim = llm_dim, crm_dim, projection_dim
        self.heads = []
        for j in range(pairs):
            self.heads.append((
                self._param(f"{j}.g_llm.W", glorot(rng, llm_dim, projection_dim)),
                self._param(f"{j}.g_llm.b", np.zeros(projection_dim)),
                self._param(f"{j}.g_crm.W", glorot(rng, crm_dim, projection_dim)),
                self._param(f"{j}.g_crm.b", np.zeros(projection_dim)),
            ))

    @classmethod
    def from_arrays(cls, pairs: Sequence[tuple]) -> "ProjectionHeads":
        """Heads from explicit (W_llm, b_llm, W_crm, b_crm) tuples."""
        w0 = np.asarray(pairs[0][0])
        heads = cls(w0.shape[0], np.asarray(pairs[0][2]).shape[0], len(pairs), w0.shape[1])
        for (wl, bl, wc, bc), nodes in zip(pairs, heads.heads):
            for node, arr in zip(nodes, (wl, bl, wc, bc)):
                node.values = np.asarray(arr, dtype=np.float64)
        return heads


def _as_batch(h) -> Node:
    h = h if isinstance(h, Node) else Node(h)
    return ops.reshape(h, (1, h.shape[0])) if h.ndim == 1 else h


def alignment_per_sample(llm_hidden: Sequence, crm_hidden: Sequence, heads: ProjectionHeads,
                         exponent: float = 2.0) -> Node:
    """Per-sample sum over pairs of ||g_llm(h_llm) - g_crm(h_crm)||_2 ** exponent."""
    if exponent <= 0:
        raise ValueError(f"align exponent must be > 0, got {exponent}")
    if not (len(llm_hidden) == len(crm_hidden) == len(heads.heads)):
        raise ValueError(f"need one head per pair: {len(llm_hidden)} llm, "
                         f"{len(crm_hidden)} crm, {len(heads.heads)} heads")
    total = None
    for hl, hc, (wl, bl, wc, bc) in zip(llm_hidden, crm_hidden, heads.heads):
        hl, hc = _as_batch(hl), _as_batch(hc)
        if hl.shape[-1] != wl.shape[0] or hc.shape[-1] != wc.shape[0]:
            raise ValueError(f"hidden sizes {hl.shape[-1]}/{hc.shape[-1]} do not match "
                             f"heads {wl.shape[0]}/{wc.shape[0]}")
        diff = ops.sub(linear(hl, wl, bl), linear(hc, wc, bc))
        term = ops.power(ops.l2_norm(diff, axis=-1), exponent)
        total = term if total is None else ops.add(total, term)
    return total


def alignment_loss(llm_hidden, crm_hidden, heads, exponent: float = 2.0,
                   reduction: str = "sum") -> Node:
    per = alignment_per_sample(llm_hidden, crm_hidden, heads, exponent)
    if reduction == "sum":
        return ops.sum_(per)
    if reduction == "mean":
        return ops.mean(per)
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass(frozen=True)
class LossWeights:
    alpha: float  # language-model loss
    beta: float   # recommender loss
    gamma: float  # alignment loss

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if not (self.alpha or self.beta or self.gamma):
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


@dataclass
class LossBreakdown:
    l_llm: float
    l_crm: float
    l_cal: float
    total: float
    node: Node | None = field(default=None, repr=False, compare=False)


def _value(x) -> float:
    if x is None:
        return 0.0
    return x.item() if isinstance(x, Node) else float(x)


def total_loss(l_llm, l_crm, l_cal, weights: LossWeights) -> LossBreakdown:
    """alpha * l_llm + beta * l_crm + gamma * l_cal.

    Components may be Nodes, floats or None; zero-weighted ones are left out
    of the graph entirely.
    """
    terms = []
    for w, comp in zip(weights.as_tuple(), (l_llm, l_crm, l_cal)):
        if w == 0:
            continue
        if comp is None:
            raise ValueError("a positively weighted loss component is missing")
        if not np.isfinite(_value(comp)):
            raise FloatingPointError("non-finite loss component")
        terms.append(ops.mul(comp, w) if isinstance(comp, Node) else Node(w * float(comp)))
    node = terms[0]
    for t in terms[1:]:
        node = ops.add(node, t)
    parts = [_value(c) for c in (l_llm, l_crm, l_cal)]
    total = sum(w * p for w, p in zip(weights.as_tuple(), parts))
    return LossBreakdown(*parts, total=total, node=node)
