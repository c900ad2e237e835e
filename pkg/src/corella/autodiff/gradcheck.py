"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import Node
from .rng import make_rng


def grad_check(f: Callable[[], Node], leaves: Sequence[Node], trials: int = 100,
               h: float = 1e-5, seed: int = 0) -> float:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` must rebuild its graph on every call from the current values of
    ``leaves``. Returns the worst |analytic - numeric| / max(1, |analytic|, |numeric|)
    over ``trials`` sampled coordinates.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    for leaf in leaves:
        leaf.zero_grad()
    f().backward()
    analytic = [np.zeros(l.shape) if l.grad is None else l.grad.copy() for l in leaves]

    rng = make_rng(seed)
    sizes = np.array([l.values.size for l in leaves])
    worst = 0.0
    for _ in range(trials):
        li = int(rng.choice(len(leaves), p=sizes / sizes.sum()))
        leaf = leaves[li]
        flat = int(rng.integers(leaf.values.size))
        idx = np.unravel_index(flat, leaf.shape)
        original = leaf.values[idx]
        bumped = leaf.values.copy()
        bumped[idx] = original + h
        leaf.values = bumped
        up = f().item()
        bumped = bumped.copy()
        bumped[idx] = original - h
        leaf.values = bumped
        down = f().item()
        restored = bumped.copy()
        restored[idx] = original
        leaf.values = restored
        numeric = (up - down) / (2 * h)
        a = float(analytic[li][idx])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
