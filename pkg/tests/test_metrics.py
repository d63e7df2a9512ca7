import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imachsr import metrics
from imachsr.metrics import ConfusionMatrix, summarize

MEANS = ("mIoU", "mPre", "mRec", "mF1")


def test_perfect_predictions_diagonal(rng):
    y = rng.integers(0, 3, size=(6, 6))
    cm = ConfusionMatrix(3).accumulate(y, y)
    assert not (cm.counts - np.diag(np.diag(cm.counts))).any()
    s = summarize(cm)
    assert all(s[k] == 1.0 for k in MEANS)


def test_single_pixel():
    cm = metrics.accumulate(ConfusionMatrix(2), np.array([[1]]), np.array([[0]]))
    assert cm.counts.tolist() == [[0, 1], [0, 0]]


def test_hand_computed_fixture():
    s = summarize(np.array([[50, 10], [5, 35]]))
    assert s["mIoU"] == pytest.approx((50 / 65 + 35 / 50) / 2, abs=1e-15)
    expected = {"mIoU": 0.73462, "mPre": 0.84343, "mRec": 0.85417, "mF1": 0.84655}
    for k, v in expected.items():
        assert abs(s[k] - v) < 1e-5, k
    assert s["per_class"][0]["f1"] == pytest.approx(2 * 50 / (2 * 50 + 10 + 5), abs=1e-15)


def test_absent_class_flagged():
    s = summarize(np.array([[4, 1, 0], [2, 3, 0], [0, 0, 0]]))
    c2 = s["per_class"][2]
    assert c2["iou"] == 0.0 and set(c2["undefined"]) == {"iou", "precision", "recall", "f1"}
    assert s["per_class"][0]["undefined"] == []


def test_empty_matrix_rejected():
    with pytest.raises(ValueError, match="empty"):
        summarize(ConfusionMatrix(2))


def test_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        ConfusionMatrix(2).accumulate(np.array([2]), np.array([0]))
    with pytest.raises(ValueError, match="out of range"):
        ConfusionMatrix(2).accumulate(np.array([0]), np.array([-1]))


def test_additivity_and_merge(rng):
    a_p, a_y = rng.integers(0, 4, (2, 5, 5))
    b_p, b_y = rng.integers(0, 4, (2, 5, 5))
    two = ConfusionMatrix(4).accumulate(a_p, a_y).accumulate(b_p, b_y)
    cat = ConfusionMatrix(4).accumulate(np.concatenate([a_p, b_p]), np.concatenate([a_y, b_y]))
    merged = ConfusionMatrix(4).accumulate(a_p, a_y) + ConfusionMatrix(4).accumulate(b_p, b_y)
    assert two == cat == merged
    assert two.total == 50


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2 ** 32 - 1))
def test_bounds_and_permutation_invariance(k, seed):
    r = np.random.default_rng(seed)
    counts = r.integers(0, 30, size=(k, k))
    counts[0, 0] += 1
    s = summarize(counts)
    perm = r.permutation(k)
    sp = summarize(counts[np.ix_(perm, perm)])
    for key in MEANS:
        assert 0.0 <= s[key] <= 1.0
        assert abs(s[key] - sp[key]) < 1e-12
    for new, old in enumerate(perm):
        assert sp["per_class"][new]["iou"] == pytest.approx(s["per_class"][old]["iou"], abs=1e-15)
    if np.diag(counts).any():
        assert s["mF1"] > 0


def test_shuffled_order_bit_exact(rng):
    preds = rng.integers(0, 3, size=(10, 4, 4))
    labels = rng.integers(0, 3, size=(10, 4, 4))

    def run(order):
        cm = ConfusionMatrix(3)
        for i in order:
            cm.accumulate(preds[i], labels[i])
        return summarize(cm)

    assert run(range(10)) == run(rng.permutation(10))
