import json
import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, strategies as st

from corella.autodiff import make_rng
from corella.router import (
    Prediction, RouterConfig, calibrate_tau, confidence_groups, entropy, mixup_inference, route,
    route_mask, routed_count, write_group_report,
)
from oracles import brute_route


def test_entropy_examples():
    assert abs(entropy(0.5) - math.log(2)) <= 1e-12
    assert entropy(0.0) <= 3e-11 and entropy(1.0) <= 3e-11
    assert abs(entropy(0.9) - 0.325082973391448) <= 1e-9


def test_entropy_symmetric_and_monotone():
    p = np.linspace(0, 1, 1001)
    np.testing.assert_allclose(entropy(p), entropy(1 - p), atol=1e-12, rtol=0)
    half = entropy(p[500:])  # |p - 0.5| increasing
    assert np.all(np.diff(half) < 0)


def test_entropy_rejects_nan():
    with pytest.raises(ValueError):
        entropy(np.array([0.2, np.nan]))


def test_routed_count_is_exact_ceiling():
    assert routed_count(10, 0.33) == 4
    assert routed_count(9, 1 / 3) == 3
    assert routed_count(3000, 1 / 3) == 1000  # binary 1/3 lies just below one third
    assert routed_count(3001, 1 / 3) == 1001
    assert routed_count(10, 0.0) == 0 and routed_count(10, 1.0) == 10


def test_route_examples():
    rng = make_rng(4)
    s = rng.permutation(10) / 20
    ids = np.arange(10)
    mask = route_mask(s, ids, RouterConfig(rho=0.33))
    assert mask.sum() == 4 and set(np.flatnonzero(mask)) == set(np.argsort(-s)[:4])
    assert route_mask(s, ids, RouterConfig(rho=0.0)).sum() == 0
    assert route_mask(s, ids, RouterConfig(rho=1.0)).all()
    two = route_mask([0.69, 0.10], [0, 1], RouterConfig(rho=0.5))
    assert two.tolist() == [True, False]


def test_route_ties_break_by_sample_id():
    mask = route_mask([0.5, 0.5, 0.5, 0.1], [7, 3, 5, 1], RouterConfig(rho=0.5))
    assert mask.tolist() == [False, True, True, False]


def test_route_matches_brute_force_on_random_sets():
    rng = make_rng(77, "routing")
    for _ in range(500):
        n = int(rng.integers(1, 60))
        s = np.round(rng.random(n) * 0.69, 2)  # rounding forces ties
        ids = rng.permutation(1000)[:n]
        rho = float(rng.random())
        mask = route_mask(s, ids, RouterConfig(rho=rho))
        # Decimal(rho) is the exact binary value, so this is an independent exact ceiling
        assert mask.sum() == math.ceil(Decimal(rho) * n)
        if 0 < mask.sum() < n:
            assert s[mask].min() >= s[~mask].max()
        assert set(np.flatnonzero(mask)) == brute_route(list(s), list(ids), int(mask.sum()))


def test_route_on_prediction_records():
    preds = [Prediction(i, p, entropy(p), y_llm=0.9) for i, p in enumerate([0.5, 0.99, 0.6])]
    out = route(preds, RouterConfig(rho=1 / 3))
    assert [p.routed for p in out] == [True, False, False]
    assert out[0].y_final == 0.9 and out[1].y_final == 0.99 and out[1].y_llm is None


def test_absolute_mode_and_calibration():
    s = np.linspace(0, 0.69, 100)
    tau = calibrate_tau(s, 0.25)
    mask = route_mask(s, np.arange(100), RouterConfig("absolute", 0.25, tau))
    assert mask.sum() == 25 and np.all(s[mask] > tau)
    with pytest.raises(ValueError):
        RouterConfig("absolute", tau=None).validate()
    with pytest.raises(ValueError):
        RouterConfig("quantile", rho=1.5).validate()


class _FakeCrm:
    def __init__(self, p):
        self.p = np.asarray(p, dtype=float)

    def predict(self, ids):
        return self.p[np.asarray(ids)[:, 0]]


class _FakeLlm:
    def __init__(self):
        self.seen = 0

    def predict(self, tokens, lengths):
        self.seen += len(tokens)
        return np.full(len(tokens), 0.123)


def _samples(n):
    from corella.data import SampleArrays
    return SampleArrays(ids=np.arange(n)[:, None], tokens=np.ones((n, 3), dtype=int),
                        lengths=np.full(n, 3), labels=np.arange(n) % 2,
                        label_tokens=np.zeros(n, dtype=int), sample_ids=np.arange(n) + 100)


def test_mixup_rho_zero_is_crm_only_bitwise():
    p = make_rng(3).random(40)
    llm = _FakeLlm()
    res = mixup_inference(_FakeCrm(p), llm, _samples(40), RouterConfig(rho=0.0))
    assert res.y_final.tobytes() == p.tobytes() and llm.seen == 0 and res.llm_calls == 0


def test_mixup_only_routed_samples_reach_llm():
    p = make_rng(3).random(30)
    llm = _FakeLlm()
    res = mixup_inference(_FakeCrm(p), llm, _samples(30), RouterConfig(rho=1 / 3))
    assert llm.seen == res.llm_calls == 10 == res.routed.sum()
    assert np.all(res.y_final[res.routed] == 0.123)
    np.testing.assert_array_equal(res.y_final[~res.routed], p[~res.routed])
    assert np.all(np.isnan(res.y_llm[~res.routed]))
    preds = res.predictions()
    assert all((q.y_llm is not None) == q.routed for q in preds)


def test_confidence_groups_balanced_and_ordered(tmp_path):
    rng = make_rng(8)
    s = rng.random(9) * 0.6
    rows = confidence_groups(s, rng.integers(0, 2, 9), {"crm": rng.random(9)}, k=3)
    assert [r["n"] for r in rows] == [3, 3, 3]
    means = [r["mean_entropy"] for r in rows]
    assert means == sorted(means)
    assert rows[0]["mean_entropy"] == pytest.approx(np.sort(s)[:3].mean())
    write_group_report(rows, tmp_path / "g.csv", tmp_path / "g.json")
    head = (tmp_path / "g.csv").read_text().splitlines()[0]
    assert head == "group,n,mean_entropy,auc,acc,logloss,scorer"
    assert len(json.loads((tmp_path / "g.json").read_text())["groups"]) == 3


@given(st.integers(3, 200), st.integers(2, 6), st.integers(0, 10_000))
def test_confidence_groups_sizes(n, k, seed):
    if n < k:
        return
    rng = make_rng(seed, "groups")
    s = rng.random(n)
    labels = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    rows = confidence_groups(s, labels, {"a": rng.random(n)}, k=k)
    sizes = [r["n"] for r in rows]
    assert sum(sizes) == n and max(sizes) - min(sizes) <= 1
    means = [r["mean_entropy"] for r in rows]
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_undefined_auc_reported_as_marker(tmp_path):
    rows = confidence_groups([0.1, 0.2, 0.3, 0.4], [1, 1, 0, 0], {"c": [0.9, 0.8, 0.2, 0.1]}, k=2)
    assert rows[0]["auc"] is None
    write_group_report(rows, tmp_path / "g.csv")
    assert "undefined" in (tmp_path / "g.csv").read_text()
