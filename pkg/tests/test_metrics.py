import numpy as np
import pytest

from livectr.labels import ReportPolicy, assemble
from livectr.metrics import (ScoredExample, auc, auc_examples, calibration_bias, consistency_table,
                             detection_lag, gauc, gauc_examples)
from livectr.sim import TASKS, SimConfig, simulate

from conftest import make_log


def pair_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        return None
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_auc_examples():
    hand = [(0.9, 1), (0.8, 0), (0.7, 1), (0.6, 1), (0.5, 0), (0.4, 0)]
    assert auc(*zip(*hand)) == pytest.approx(7 / 9, abs=1e-12)
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3, 0.4], [1, 1]) is None
    rng = np.random.default_rng(0)
    assert abs(auc(rng.random(20000), rng.integers(0, 2, 20000)) - 0.5) < 0.02
    assert auc_examples([ScoredExample(0, s, y) for s, y in hand]) == pytest.approx(7 / 9)


def test_auc_matches_pair_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 120))
        scores = rng.integers(0, 8, n) / 7.0 if rng.random() < 0.5 else rng.random(n)
        labels = rng.integers(0, 2, n)
        got, want = auc(scores, labels), pair_oracle(scores, labels)
        assert (got is None) == (want is None)
        if want is not None:
            assert abs(got - want) < 1e-12


def test_auc_monotone_invariance():
    rng = np.random.default_rng(2)
    s = rng.normal(size=300)
    y = rng.integers(0, 2, 300)
    base = auc(s, y)
    for f in (np.exp, lambda x: 3 * x + 1, np.arctan):
        assert auc(f(s), y) == pytest.approx(base, abs=1e-12)


def test_gauc_fixtures():
    # user 0: AUC 1.0 on 10 examples, user 1: AUC 0.5 on 30 examples
    u0 = [(0, 0.9, 1)] * 5 + [(0, 0.1, 0)] * 5
    u1 = [(1, 0.5, i % 2) for i in range(30)]
    users, scores, labels = zip(*(u0 + u1))
    assert gauc(users, scores, labels) == pytest.approx(0.625, abs=1e-12)
    single = [(3, 0.9, 1), (3, 0.8, 0), (3, 0.7, 1), (4, 0.2, 1)]
    assert gauc(*zip(*single)) == pytest.approx(auc([0.9, 0.8, 0.7], [1, 0, 1]))
    assert gauc([1, 1, 2], [0.2, 0.3, 0.4], [1, 1, 0]) is None
    ex = [ScoredExample(u, s, y) for u, s, y in u0 + u1]
    assert gauc_examples(ex) == pytest.approx(0.625)


def test_gauc_identical_user_auc():
    rng = np.random.default_rng(3)
    users, scores, labels = [], [], []
    for u in range(20):
        n = int(rng.integers(1, 5))
        # each user: n positives above n negatives, then one crossed pair -> same AUC for all
        block = [(2.0, 1), (-2.0, 0)]
        for s, y in block * n:
            users.append(u)
            scores.append(s + rng.random() * 0.1)
            labels.append(y)
    assert gauc(users, scores, labels) == pytest.approx(1.0)


def test_consistency_scripted():
    sessions = [(i, 0.0, 5000.0, [("like", ts)]) for i, ts in enumerate([10.0, 100.0, 250.0, 1000.0])]
    rows = {r.task: r for r in consistency_table(assemble(make_log(sessions), ReportPolicy("fast_slow")))}
    assert rows["like"].consistency == 0.75
    assert rows["gift"].consistency is None
    early = [(i, 0.0, 5000.0, [(t, 5.0 + i) for t in ("click", "like", "comment", "gift")]) for i in range(3)]
    rows = consistency_table(assemble(make_log(early), ReportPolicy("fast_slow")))
    assert all(r.consistency == 1.0 for r in rows if r.task in ("click", "like", "comment", "gift"))


def test_consistency_window_monotone():
    res = simulate(SimConfig(num_users=300, num_rooms=5, horizon=7200.0, seed=4))
    prev = None
    for fw in (60.0, 120.0, 300.0, 600.0):
        rows = {r.task: r.consistency for r in consistency_table(assemble(res.events, ReportPolicy("fast_slow", fast_window=fw)))}
        assert all(v is None or 0.0 <= v <= 1.0 for v in rows.values())
        if prev:
            assert all(rows[t] >= prev[t] - 1e-12 for t in TASKS if rows[t] is not None and prev[t] is not None)
        prev = rows


def test_detection_lag_shift_and_penalty():
    t = np.arange(0.0, 3600.0, 30.0)
    truth = np.where((t >= 1200) & (t < 2000), 0.6, 0.2)
    shifted = np.where((t >= 1320) & (t < 2120), 0.6, 0.2)
    assert detection_lag(t, shifted, truth) == pytest.approx(120.0)
    assert detection_lag(t, shifted, onsets=[1200.0]) == pytest.approx(120.0)
    flat = np.full_like(t, 0.3)
    assert detection_lag(t, flat, truth) == pytest.approx(t[-1] - 1200.0)
    assert detection_lag(t, flat, truth, max_lag=900.0) == pytest.approx(900.0)
    with pytest.raises(ValueError):
        detection_lag([], [], [])
    with pytest.raises(ValueError):
        detection_lag(t, flat, np.zeros_like(t))


def test_calibration_bias():
    prob = np.full((4, len(TASKS)), 0.5)
    labels = np.zeros((4, len(TASKS)))
    labels[:2, 0] = 1
    bias = calibration_bias(prob, labels)
    assert bias["click"] == 0.0 and bias["gift"] == 0.5
    assert calibration_bias(np.zeros((0, len(TASKS))), np.zeros((0, len(TASKS))))["click"] is None
