"""Parameter-container helpers shared by the models."""

from __future__ import annotations

import hashlib
from typing import Mapping

import numpy as np

from .autodiff import Node, ops


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))


def he(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    y = ops.matmul(x, w)
    return y if b is None else ops.add(y, b)


class ParamModule:
    """Owns an ordered ``name -> Node`` mapping of trainable arrays."""

    prefix = ""

    def __init__(self):
        self.params: dict[str, Node] = {}

    def _param(self, name: str, values) -> Node:
        node = Node(np.array(values, dtype=np.float64), requires_grad=True,
                    name=f"{self.prefix}{name}")
        self.params[f"{self.prefix}{name}"] = node
        return node

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray], strict: bool = True):
        missing = [k for k in self.params if k not in state]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in self.params.items():
            if k in state:
                arr = np.asarray(state[k], dtype=np.float64)
                if arr.shape != p.shape:
                    raise ValueError(f"{k}: shape {arr.shape} does not match {p.shape}")
                p.values = arr.copy()

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].values).tobytes())
        return h.hexdigest()

    def num_parameters(self) -> int:
        return sum(p.values.size for p in self.params.values())
