"""Synthetic routing benchmark.

Labels of ordinary samples follow a fixed logistic model of the ID fields, so
an ID-only recommender can learn them. A fraction of items is "cue-prone":
on those items a hidden fair coin decides whether the label is flipped, and a
CUE token appears in the prompt exactly when it is. The coin is invisible in
the ID modality, so the best ID-only prediction on cue samples is 0.5, while a
text model that reads the CUE token can recover the label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff.rng import make_rng
from .interactions import Interaction, chronological_split


@dataclass
class SyntheticConfig:
    n: int = 20_000
    n_users: int = 300
    n_items: int = 120
    user_fields: dict[str, int] = field(default_factory=lambda: {"age": 7, "occupation": 12})
    item_fields: dict[str, int] = field(default_factory=lambda: {"genre": 10})
    cue_fraction: float = 0.30
    noise: float = 0.05
    cue_item_strength: float = 4.0
    seed: int = 42

    def validate(self):
        if not 0.0 <= self.cue_fraction <= 1.0:
            raise ValueError(f"cue_fraction {self.cue_fraction} outside [0, 1]")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError(f"noise {self.noise} outside [0, 0.5)")
        if self.n < 10 or self.n_users < 1 or self.n_items < 1:
            raise ValueError("synthetic sizes too small")


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def calibrate_temperature(scores: np.ndarray, noise: float) -> float:
    """Temperature T with mean(min(p, 1-p)) == noise for p = sigmoid(score / T)."""
    if noise <= 0.0:
        return 0.0
    a = np.abs(scores)

    def bayes_error(t):
        return float(np.mean(_sigmoid(-a / t)))

    lo, hi = 1e-6, 1.0
    while bayes_error(hi) < noise:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if bayes_error(mid) < noise:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class SyntheticWorld:
    """Ground truth behind a generated dataset, kept for oracle checks."""

    scores: np.ndarray
    temperature: float
    base_prob: np.ndarray
    cue_items: np.ndarray


def generate_synthetic(config: SyntheticConfig, rng: np.random.Generator | None = None,
                       return_world: bool = False):
    config.validate()
    rng = rng if rng is not None else make_rng(config.seed, "synthetic")
    n, nu, ni = config.n, config.n_users, config.n_items

    user_attr = {f: rng.integers(c, size=nu) for f, c in config.user_fields.items()}
    item_attr = {f: rng.integers(c, size=ni) for f, c in config.item_fields.items()}
    w_user = rng.normal(0.0, 1.0, nu)
    w_item = rng.normal(0.0, 1.0, ni)
    w_uattr = {f: rng.normal(0.0, 0.5, c) for f, c in config.user_fields.items()}
    w_iattr = {f: rng.normal(0.0, 0.5, c) for f, c in config.item_fields.items()}
    # one pairwise term between the first user and first item attribute
    uf0 = next(iter(config.user_fields), None)
    if0 = next(iter(config.item_fields), None)
    w_pair = (rng.normal(0.0, 0.7, (config.user_fields[uf0], config.item_fields[if0]))
              if uf0 and if0 else None)

    n_cue_items = int(round(config.cue_fraction * ni))
    cue_items = np.sort(rng.permutation(ni)[:n_cue_items])
    is_cue_item = np.zeros(ni, dtype=bool)
    is_cue_item[cue_items] = True
    # cue-prone items are polarizing: a strong item effect fixes their base label
    polarity = rng.choice([-1.0, 1.0], size=ni)
    w_item = np.where(is_cue_item, polarity * config.cue_item_strength, w_item)

    users = rng.integers(nu, size=n)
    items = rng.integers(ni, size=n)
    score = w_user[users] + w_item[items]
    for f in config.user_fields:
        score = score + w_uattr[f][user_attr[f][users]]
    for f in config.item_fields:
        score = score + w_iattr[f][item_attr[f][items]]
    if w_pair is not None:
        score = score + w_pair[user_attr[uf0][users], item_attr[if0][items]]

    cue = is_cue_item[items]
    ordinary = ~cue
    t = calibrate_temperature(score[ordinary] if ordinary.any() else score, config.noise)
    if t == 0.0:
        base_p = (score > 0).astype(np.float64)
    else:
        base_p = _sigmoid(score / t)
    base = (rng.random(n) < base_p).astype(np.int64)
    flip = (rng.random(n) < 0.5) & cue
    label = base ^ flip.astype(np.int64)
    rating = np.where(label == 1, rng.integers(4, 6, size=n), rng.integers(1, 4, size=n))

    records = []
    for i in range(n):
        u, it = int(users[i]), int(items[i])
        records.append(Interaction(
            user_id=f"u{u}",
            item_id=f"i{it}",
            user_attrs=tuple((f, f"{f}_{int(user_attr[f][u])}") for f in config.user_fields),
            item_attrs=tuple((f, f"{f}_{int(item_attr[f][it])}") for f in config.item_fields),
            item_title=f"item_{it:03d}",
            rating=int(rating[i]),
            timestamp=1_000_000 + 60 * i,
            label=int(label[i]),
            is_cue=bool(cue[i]),
            cue_token=bool(flip[i]),
        ))
    split = chronological_split(records)
    if return_world:
        return split, SyntheticWorld(score, t, base_p, cue_items)
    return split
