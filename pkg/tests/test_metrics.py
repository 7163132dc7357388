import numpy as np
import pytest
from hypothesis import given, strategies as st

from brushforge.metrics import ScoreReport, aggregate, confusion, scores
from oracles import brute_scores

pair = st.tuples(st.integers(1, 4), st.integers(1, 4))


def test_confusion_basics():
    assert not confusion([]).any()
    cm = confusion([(1, 1), (1, 2)])
    assert cm[0].tolist() == [1, 1, 0, 0] and cm.sum() == 2
    with pytest.raises(ValueError):
        confusion([(0, 1)])
    with pytest.raises(ValueError):
        confusion([(1, 5)])


@given(st.lists(pair, max_size=60), st.randoms())
def test_confusion_order_independent(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    np.testing.assert_array_equal(confusion(pairs), confusion(shuffled))


def test_single_artist_example():
    # artist 1: TP 8, FP 2, FN 2
    cm = np.zeros((4, 4), dtype=int)
    cm[0, 0], cm[1, 0], cm[0, 1], cm[1, 1] = 8, 2, 2, 5
    r = scores(cm)
    assert (r.f1[0], r.precision[0], r.recall[0]) == pytest.approx((0.8, 0.8, 0.8))


def test_perfect_and_empty():
    r = scores(np.diag([3, 4, 5, 6]))
    assert r.accuracy == 1.0 and np.all(r.f1 == 1.0)
    with pytest.raises(ValueError):
        scores(np.zeros((4, 4), dtype=int))


def test_reference_test_set_accuracy():
    cm = np.diag([180 - e for e in (12, 0, 2, 14)])
    cm[0, 1], cm[2, 3], cm[3, 0] = 12, 2, 14
    r = scores(cm)
    assert r.total == 720
    assert r.accuracy == pytest.approx(692 / 720) and round(r.accuracy, 4) == 0.9611


def test_zero_denominator_is_zero():
    r = scores(confusion([(1, 1), (1, 1)]))
    assert r.f1[1:].tolist() == [0, 0, 0] and r.precision[2] == 0


def test_brute_force_oracle_many_sets():
    rng = np.random.default_rng(0)
    for _ in range(100_000):
        n = int(rng.integers(1, 12))
        true = rng.integers(1, 5, n)
        pred = rng.integers(1, 5, n)
        r = scores(confusion(zip(true, pred)))
        acc, f1, prec, rec = brute_scores(true, pred)
        assert r.accuracy == acc
        assert r.f1.tolist() == f1 and r.precision.tolist() == prec and r.recall.tolist() == rec


@given(st.lists(pair, min_size=1, max_size=80))
def test_micro_consistency_and_harmonic_mean(pairs):
    cm = confusion(pairs)
    r = scores(cm)
    assert np.trace(cm) / cm.sum() == r.accuracy
    for f, p, q in zip(r.f1, r.precision, r.recall):
        if p > 0 and q > 0:
            assert f == pytest.approx(2 * p * q / (p + q), rel=1e-12)
        assert 0 <= f <= 1


def test_aggregate_and_csv_row():
    a = scores(np.diag([5, 5, 5, 5]))
    b = scores(confusion([(1, 2), (2, 2), (3, 3), (4, 4)]))
    agg = aggregate([a, b])
    assert agg.trials == 2 and agg.accuracy == pytest.approx(0.875)
    assert agg.acc_std == pytest.approx(np.std([1.0, 0.75], ddof=1))
    row = agg.csv_row("x", 40)
    assert len(row) == len(ScoreReport.CSV_HEADER) and row[:3] == ["x", "40", "0.875000"]
    with pytest.raises(ValueError):
        aggregate([])
