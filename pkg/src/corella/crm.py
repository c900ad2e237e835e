"""DCNv2-style recommender: field embeddings, a cross network in parallel with
a ReLU tower, and a sigmoid click head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Node, no_grad, ops
from .nn import ParamModule, glorot, he, linear


@dataclass
class CrmConfig:
    d_emb: int = 16
    n_cross: int = 3
    deep: list[int] = field(default_factory=lambda: [128, 64])


def cross_layer(x0: Node, xl: Node, w: Node, b: Node) -> Node:
    """x_{l+1} = x0 * (x_l W + b) + x_l."""
    return ops.add(ops.mul(x0, linear(xl, w, b)), xl)


class CrmModel(ParamModule):
    prefix = "crm."

    def __init__(self, fields: Sequence[str], cardinalities: Sequence[int],
                 config: CrmConfig | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.config = config or CrmConfig()
        self.fields = list(fields)
        self.cardinalities = [int(c) for c in cardinalities]
        if len(self.fields) != len(self.cardinalities):
            raise ValueError("one cardinality per field")
        rng = rng if rng is not None else np.random.default_rng(0)
        d = self.config.d_emb
        self.dim = d * len(self.fields)
        D = self.dim
        self.embeddings = [self._param(f"embedding.{f}", rng.normal(0.0, 0.05, (c, d)))
                           for f, c in zip(self.fields, self.cardinalities)]
        self.cross = []
        for l in range(self.config.n_cross):
            w = self._param(f"cross.{l}.W", glorot(rng, D, D) * 0.5)
            b = self._param(f"cross.{l}.b", np.zeros(D))
            self.cross.append((w, b))
        self.deep = []
        width = D
        for k, h in enumerate(self.config.deep):
            self.deep.append((self._param(f"deep.{k}.W", he(rng, width, h)),
                              self._param(f"deep.{k}.b", np.zeros(h))))
            width = h
        self.head_w = self._param("head.W", glorot(rng, D + width, 1))
        self.head_b = self._param("head.b", np.zeros(1))

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    def embed(self, ids) -> Node:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != self.num_fields:
            raise ValueError(f"id_input must have shape (batch, {self.num_fields}), got {ids.shape}")
        for j, (f, c) in enumerate(zip(self.fields, self.cardinalities)):
            col = ids[:, j]
            if col.size and (col.min() < 0 or col.max() >= c):
                raise IndexError(f"field '{f}': index outside [0, {c})")
        return ops.concat([ops.embedding(t, ids[:, j]) for j, t in enumerate(self.embeddings)],
                          axis=-1)

    def forward(self, ids) -> tuple[Node, list[Node]]:
        """Click probability (batch,) and cross-layer outputs [(batch, D)] * n_cross."""
        x0 = self.embed(ids)
        x = x0
        hidden = []
        for w, b in self.cross:
            x = cross_layer(x0, x, w, b)
            hidden.append(x)
        h = x0
        for w, b in self.deep:
            h = ops.relu(linear(h, w, b))
        logit = linear(ops.concat([x, h], axis=-1), self.head_w, self.head_b)
        prob = ops.sigmoid(ops.reshape(logit, (logit.shape[0],)))
        return prob, hidden

    def predict(self, ids, batch_size: int = 4096) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        out = []
        with no_grad():
            for s in range(0, len(ids), batch_size):
                out.append(self.forward(ids[s:s + batch_size])[0].values)
        return np.concatenate(out) if out else np.zeros(0)


def crm_loss(prob: Node, labels) -> Node:
    """Mean binary cross-entropy with probabilities clamped to [1e-12, 1 - 1e-12]."""
    return ops.bce(prob, np.asarray(labels, dtype=np.float64), eps=1e-12)
