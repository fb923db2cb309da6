import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bomasim.leakage import TraceSet
from bomasim.tvla import (
    CLAMP,
    DegenerateClass,
    MomentAccumulator,
    ShapeMismatch,
    TvlaReport,
    report_from,
    t_first_order,
    t_second_order,
    verdict,
)


def _set(samples, labels):
    return TraceSet(np.asarray(labels), np.asarray(samples, dtype=np.float32))


def _textbook(x, labels, second=False):
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.shape[1]):
        a = [v for v, l in zip(x[:, j], labels) if l == 0]
        b = [v for v, l in zip(x[:, j], labels) if l == 1]
        if second:
            ma, mb = sum(a) / len(a), sum(b) / len(b)
            a = [(v - ma) ** 2 for v in a]
            b = [(v - mb) ** 2 for v in b]
        ma, mb = sum(a) / len(a), sum(b) / len(b)
        va = sum((v - ma) ** 2 for v in a) / (len(a) - 1)
        vb = sum((v - mb) ** 2 for v in b) / (len(b) - 1)
        cols.append((ma - mb) / np.sqrt(va / len(a) + vb / len(b)))
    return np.array(cols)


def _close(a, b, rel=1e-9):
    return np.allclose(a, b, rtol=rel, atol=rel * max(1.0, float(np.max(np.abs(b)))))


def test_closed_form_example():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(1000, 4))
    a = (a - a.mean(0)) / a.std(0, ddof=1)
    b = a + 1.0
    t = t_first_order(_set(np.vstack([a, b]), [0] * 1000 + [1] * 1000)).t
    assert np.allclose(t, -np.sqrt(500), atol=1e-4)
    assert round(float(t[0]), 1) == -22.4


def test_toy_set_against_textbook():
    x = np.array([[1, 2, 3], [2, 2, 5], [0, 1, 4], [5, 3, 3], [4, 4, 9]], dtype=np.float64)
    lab = [0, 0, 1, 1, 1]
    assert _close(t_first_order(_set(x, lab)).t, _textbook(x, lab))
    acc = MomentAccumulator(3).accumulate(x, lab)
    assert _close(acc.t_first()[0], _textbook(x, lab))


def test_null_hypothesis_passes():
    rng = np.random.default_rng(2)
    ts = _set(rng.normal(size=(2000, 100)), rng.integers(0, 2, 2000))
    assert t_first_order(ts).max_abs_t < 4.5
    assert verdict(t_second_order(ts))[0] == "PASS"


def test_variance_difference_shows_in_second_order_only():
    rng = np.random.default_rng(3)
    x = np.vstack([rng.normal(0, 1, (4000, 5)), rng.normal(0, 2, (4000, 5))])
    ts = _set(x, [0] * 4000 + [1] * 4000)
    assert t_first_order(ts).max_abs_t < 4.5
    assert np.all(np.abs(t_second_order(ts).t) > 20)


def test_streaming_matches_two_pass_on_ten_thousand_traces():
    rng = np.random.default_rng(4)
    x = rng.normal(100, 3, (10_000, 20)) + rng.integers(0, 2, (10_000, 1)) * 0.1
    lab = rng.integers(0, 2, 10_000)
    ts = _set(x, lab)
    acc = MomentAccumulator(20)
    for s in range(0, 10_000, 333):
        acc.accumulate(ts.samples[s:s + 333], lab[s:s + 333])
    assert _close(acc.t_first()[0], t_first_order(ts).t)
    assert _close(acc.t_second()[0], t_second_order(ts).t)


def test_one_by_one_equals_merged_halves():
    rng = np.random.default_rng(5)
    x, lab = rng.normal(size=(1000, 6)), rng.integers(0, 2, 1000)
    single = MomentAccumulator(6)
    for row, l in zip(x, lab):
        single.accumulate(row, [l])
    halves = MomentAccumulator(6).accumulate(x[:500], lab[:500]).merge(MomentAccumulator(6).accumulate(x[500:], lab[500:]))
    for order in ("t_first", "t_second"):
        assert _close(getattr(single, order)()[0], getattr(halves, order)()[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(4, 60), st.integers(4, 60), st.integers(4, 60))
def test_merge_commutative_associative_identity(seed, na, nb, nc):
    rng = np.random.default_rng(seed)
    accs = []
    for n in (na, nb, nc):
        lab = np.r_[[0, 0, 1, 1], rng.integers(0, 2, n - 4)]
        accs.append(MomentAccumulator(3).accumulate(rng.normal(5, 2, (n, 3)) ** 2, lab))
    a, b, c = accs
    for f in ("t_first", "t_second"):
        ab, ba = getattr(a.merge(b), f)()[0], getattr(b.merge(a), f)()[0]
        assert _close(ab, ba)
        assert _close(getattr(a.merge(b).merge(c), f)()[0], getattr(a.merge(b.merge(c)), f)()[0])
        assert _close(getattr(MomentAccumulator(3).merge(a), f)()[0], getattr(a, f)()[0])
        assert _close(getattr(a.merge(MomentAccumulator(3)), f)()[0], getattr(a, f)()[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(200, 4))
    lab = np.r_[[0, 1] * 3, rng.integers(0, 2, 194)]
    a = MomentAccumulator(4).accumulate(x, lab)
    b = MomentAccumulator(4).accumulate(x * c, lab)
    assert _close(a.t_first()[0], b.t_first()[0])
    assert _close(a.t_second()[0], b.t_second()[0])


def test_label_swap_negates_exactly():
    rng = np.random.default_rng(6)
    x, lab = rng.normal(size=(300, 8)), rng.integers(0, 2, 300)
    t = MomentAccumulator(8).accumulate(x, lab).t_first()[0]
    u = MomentAccumulator(8).accumulate(x, 1 - lab).t_first()[0]
    assert np.array_equal(t, -u)
    assert np.array_equal(t_first_order(_set(x, lab)).t, -t_first_order(_set(x, 1 - lab)).t)


def test_zero_variance_handling():
    x = np.array([[1.0, 2.0], [1.0, 2.0], [1.0, 3.0], [1.0, 3.0]])
    rep = t_first_order(_set(x, [0, 0, 1, 1]))
    assert rep.t[0] == 0.0 and rep.t[1] == -CLAMP
    assert rep.clamped.tolist() == [False, True]


def test_degenerate_and_shape_errors():
    with pytest.raises(DegenerateClass):
        t_first_order(_set(np.zeros((3, 2)), [0, 1, 1]))
    with pytest.raises(DegenerateClass):
        MomentAccumulator(2).accumulate(np.zeros((4, 2)), [1, 1, 1, 1]).t_second()
    with pytest.raises(ShapeMismatch):
        MomentAccumulator(2).accumulate(np.zeros((4, 3)), [0, 1, 0, 1])
    with pytest.raises(ShapeMismatch):
        MomentAccumulator(2).merge(MomentAccumulator(3))


def test_verdict_examples():
    assert verdict(TvlaReport(np.zeros(10))) == ("PASS", [])
    t = np.zeros(10)
    t[4] = 6.0
    with pytest.warns(UserWarning, match="4"):
        assert verdict(TvlaReport(t), [(3, 5)]) == ("PASS", [])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert verdict(TvlaReport(t)) == ("FAIL", [4])
        assert verdict(TvlaReport(-t, threshold=7.0)) == ("PASS", [])


def test_report_helpers():
    acc = MomentAccumulator(3).accumulate([[0, 0, 0], [0, 1, 1], [9, 9, 9], [9, 8, 9]], [0, 0, 1, 1])
    rep = report_from(acc, 1, windows=[(0, 0)])
    assert rep.max_abs_t > rep.max_abs_t_outside() >= 0
    assert rep.exceeding.tolist() == [0, 1, 2]
    assert report_from(acc, 2).order == 2
