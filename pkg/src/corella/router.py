"""Confidence scoring, hard-sample routing and the confidence-group analysis."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import metrics

EPS = 1e-12
GROUP_COLUMNS = ("group", "n", "mean_entropy", "auc", "acc", "logloss", "scorer")


def entropy(p):
    """Binary prediction entropy in nats, with p clamped to [1e-12, 1 - 1e-12]."""
    arr = np.asarray(p, dtype=np.float64)
    if np.isnan(arr).any():
        raise ValueError("entropy of NaN")
    q = np.clip(arr, EPS, 1.0 - EPS)
    s = -(q * np.log(q) + (1.0 - q) * np.log1p(-q))
    return float(s) if s.ndim == 0 else s


@dataclass
class RouterConfig:
    mode: str = "quantile"
    rho: float = 1.0 / 3.0
    tau: float | None = None

    def validate(self):
        if self.mode == "quantile":
            if not 0.0 <= self.rho <= 1.0:
                raise ValueError(f"rho {self.rho} outside [0, 1]")
        elif self.mode == "absolute":
            if self.tau is None or not 0.0 <= self.tau <= math.log(2):
                raise ValueError(f"tau {self.tau} outside [0, ln 2]")
        else:
            raise ValueError(f"unknown router mode {self.mode!r}")
        return self


@dataclass
class Prediction:
    sample_id: int
    y_crm: float
    entropy: float
    routed: bool = False
    y_llm: float | None = None
    y_final: float | None = None


def routed_count(n: int, rho: float) -> int:
    """ceil(rho * n), evaluated exactly on the binary value of rho."""
    return min(n, math.ceil(Fraction(rho) * n))


def route_mask(entropies, sample_ids, config: RouterConfig) -> np.ndarray:
    """Boolean mask of samples handed to the language model."""
    config.validate()
    s = np.asarray(entropies, dtype=np.float64)
    ids = np.asarray(sample_ids)
    mask = np.zeros(len(s), dtype=bool)
    if config.mode == "absolute":
        return s > config.tau
    k = routed_count(len(s), config.rho)
    # highest entropy first, ties broken by ascending sample id
    order = np.lexsort((ids, -s))
    mask[order[:k]] = True
    return mask


def route(predictions: Sequence[Prediction], config: RouterConfig) -> list[Prediction]:
    mask = route_mask([p.entropy for p in predictions], [p.sample_id for p in predictions], config)
    out = []
    for p, m in zip(predictions, mask):
        out.append(Prediction(p.sample_id, p.y_crm, p.entropy, bool(m),
                              p.y_llm if m else None, p.y_llm if m else p.y_crm))
    return out


def calibrate_tau(valid_entropies, rho: float) -> float:
    """Entropy threshold routing roughly a ``rho`` fraction: the (1 - rho) quantile."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho {rho} outside [0, 1]")
    tau = float(np.quantile(np.asarray(valid_entropies, dtype=np.float64), 1.0 - rho))
    return min(max(tau, 0.0), math.log(2))


@dataclass
class MixupResult:
    sample_ids: np.ndarray
    y_crm: np.ndarray
    entropy: np.ndarray
    routed: np.ndarray
    y_llm: np.ndarray      # NaN where not routed
    y_final: np.ndarray
    llm_calls: int

    def predictions(self) -> list[Prediction]:
        return [Prediction(int(i), float(c), float(e), bool(r),
                           float(l) if r else None, float(f))
                for i, c, e, r, l, f in zip(self.sample_ids, self.y_crm, self.entropy,
                                            self.routed, self.y_llm, self.y_final)]


def mixup_inference(crm, llm, samples, config: RouterConfig) -> MixupResult:
    """CRM on everything; the language model only on the routed samples.

    ``samples`` is a :class:`corella.data.SampleArrays`.
    """
    y_crm = crm.predict(samples.ids)
    s = entropy(y_crm) if len(y_crm) else np.zeros(0)
    s = np.atleast_1d(s)
    mask = route_mask(s, samples.sample_ids, config)
    y_llm = np.full(len(y_crm), np.nan)
    idx = np.flatnonzero(mask)
    if len(idx):
        sub = samples.take(idx)
        y_llm[idx] = llm.predict(sub.tokens, sub.lengths)
    y_final = np.where(mask, y_llm, y_crm)
    return MixupResult(samples.sample_ids.copy(), y_crm, s, mask, y_llm, y_final, len(idx))


def confidence_groups(entropies, labels, scorers: Mapping[str, np.ndarray], k: int = 3,
                      sample_ids=None) -> list[dict]:
    """Split samples into ``k`` size-balanced groups by ascending entropy and
    score each group with every supplied scorer. Group 1 is the most confident."""
    s = np.asarray(entropies, dtype=np.float64)
    y = np.asarray(labels)
    if k < 2:
        raise ValueError("need at least two groups")
    if len(s) < k:
        raise ValueError(f"{len(s)} samples cannot form {k} groups")
    ids = np.arange(len(s)) if sample_ids is None else np.asarray(sample_ids)
    order = np.lexsort((ids, s))
    rows = []
    for g, idx in enumerate(np.array_split(order, k), start=1):
        for name, scores in scorers.items():
            sc = np.asarray(scores, dtype=np.float64)[idx]
            r = metrics.evaluate(y[idx], sc)
            rows.append({"group": g, "n": len(idx), "mean_entropy": float(s[idx].mean()),
                         "auc": r.auc, "acc": r.acc, "logloss": r.logloss, "scorer": name})
    return rows


def write_group_report(rows: Sequence[dict], csv_path, json_path=None):
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=GROUP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("undefined" if r[k] is None else r[k]) for k in GROUP_COLUMNS})
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"groups": list(rows)}, fh, indent=2, sort_keys=True)
