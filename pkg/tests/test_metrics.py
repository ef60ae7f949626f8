import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iwmfdiff.core import rng_stream
from iwmfdiff.metrics import auc, candidate_thresholds, crossing, eer, far, frr, rate_curves, roc_curve
from oracles import auc_ref, eer_ref


def _score_set(k):
    rng = rng_stream([11, k])
    ng, no = rng.integers(1, 101, size=2)
    # quantised scores force ties between and within the two lists
    g = np.round(rng.normal(0.5, 0.2, ng), int(rng.integers(1, 4)))
    o = np.round(rng.normal(0.2, 0.2, no), int(rng.integers(1, 4)))
    return np.clip(g, -1, 1), np.clip(o, -1, 1)


def test_frr_far_examples():
    assert frr([0.9, 0.8, 0.2], 0.5) == pytest.approx(1 / 3)
    assert far([0.1, 0.6], 0.5) == 0.5
    assert far([0.5], 0.5) == 1.0 and frr([0.5], 0.5) == 0.0
    with pytest.raises(ValueError):
        frr([], 0.5)


def test_perfect_separation():
    g, o = [0.9, 0.8, 0.7], [0.1, 0.2]
    e, tau = eer(g, o)
    assert e == 0.0 and 0.2 < tau <= 0.7
    assert auc(g, o) == 1.0


def test_identical_lists():
    s = [0.3, 0.5, 0.7]
    assert auc(s, s) == 0.5
    e, _ = eer(s, s)
    assert e == pytest.approx(eer_ref(s, s)[0])


def test_eer_and_auc_match_oracles_exactly():
    for k in range(50):
        g, o = _score_set(k)
        assert eer(g, o) == eer_ref(list(g), list(o))
        assert auc(g, o) == auc_ref(list(g), list(o))


def test_rates_monotone_in_tau():
    for k in range(50):
        g, o = _score_set(k)
        t = candidate_thresholds(g, o)
        r, a = rate_curves(g, o, t)
        assert np.all(np.diff(r) >= 0) and np.all(np.diff(a) <= 0)
        assert r[0] == 0 and a[0] == 1 and r[-1] == 1 and a[-1] == 0


def test_crossing_brackets_equal_rates():
    g, o = _score_set(3)
    tau, r, a = crossing(g, o)
    assert r == frr(g, tau) and a == far(o, tau)
    e, _ = eer(g, o)
    assert min(r, a) <= e <= max(r, a)


def test_roc_endpoints_and_order():
    g, o = _score_set(7)
    fa, ta, t = roc_curve(g, o)
    assert (fa[0], ta[0], fa[-1], ta[-1]) == (0, 0, 1, 1)
    assert np.all(np.diff(t) < 0) and np.all(np.diff(fa) >= 0) and np.all(np.diff(ta) >= 0)
    area = np.sum(np.diff(fa) * (ta[1:] + ta[:-1]) / 2)
    assert area == pytest.approx(auc(g, o), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.lists(st.floats(-1, 1), min_size=1, max_size=30))
def test_hypothesis_matches_oracles(g, o):
    assert eer(g, o) == eer_ref(g, o)
    assert auc(g, o) == auc_ref(g, o)


def test_worked_examples():
    assert frr([0.9, 0.8, 0.4], 0.6) == pytest.approx(1 / 3)
    assert far([0.5, 0.2, 0.1], 0.3) == pytest.approx(1 / 3)
    assert frr([0.9, 0.8, 0.4], -1) == 0 and frr([0.9, 0.8, 0.4], 0.95) == 1
    assert far([0.5, 0.2, 0.1], -1) == 1 and far([0.5, 0.2, 0.1], 0.51) == 0
    g, o = [0.9, 0.8, 0.4], [0.5, 0.2, 0.1]
    assert eer(g, o) == eer_ref(g, o)
    assert auc(g, o) == auc_ref(g, o) == pytest.approx(8 / 9)


def test_raising_tau_trades_security_for_accuracy():
    g, o = _score_set(21)
    taus = np.linspace(-1, 1, 41)
    fr = [frr(g, t) for t in taus]
    fa = [far(o, t) for t in taus]
    assert all(a <= b for a, b in zip(fr, fr[1:])) and all(a >= b for a, b in zip(fa, fa[1:]))
