import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pneumoscan import metrics as M


def pairwise_auc(scores, labels):
    """Mann-Whitney: fraction of (pos, neg) pairs ranked correctly, ties counting half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = Fraction(0)
    for p in pos:
        for n in neg:
            wins += 1 if p > n else Fraction(1, 2) if p == n else 0
    return float(wins / (len(pos) * len(neg)))


def test_confusion_counts():
    cm = M.confusion([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    assert M.confusion([0, 1, 2], [0, 1, 2], 3).counts.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    cm3 = M.confusion([0, 0, 1, 2, 2, 2], [0, 2, 1, 2, 0, 2], 3)
    assert cm3.support() == [2, 1, 3]
    assert cm3.total == 6


def test_confusion_rejects_out_of_range():
    with pytest.raises(M.MetricsError):
        M.confusion([0, 2], [0, 1], 2)


def test_binary_counts_reading():
    cm = M.ConfusionMatrix(np.array([[80, 20], [10, 90]]), ("neg", "pos"))
    c = M.binary_counts(cm, 1)
    assert (c.tp, c.fn, c.fp, c.tn) == (90, 10, 20, 80)
    d = M.binary_counts(M.ConfusionMatrix(np.diag([5, 7]), ("a", "b")), 0)
    assert d.fp == d.fn == 0


def test_binary_counts_three_class_complement():
    counts = np.array([[5, 1, 2], [3, 7, 4], [6, 8, 9]])
    c = M.binary_counts(M.ConfusionMatrix(counts, ("a", "b", "c")), 0)
    assert c.tn == 7 + 4 + 8 + 9
    assert (c.tp, c.fn, c.fp) == (5, 3, 9)


def test_basic_metrics_worked_example():
    m = M.basic_metrics(M.BinaryCounts(tp=90, tn=80, fp=20, fn=10))
    # hand arithmetic: 170/200, 90/100, 80/100, 90/110, 180/210
    assert m["accuracy"] == 0.85
    assert m["sensitivity"] == 0.9
    assert m["specificity"] == 0.8
    assert m["precision"] == pytest.approx(0.8182, abs=1e-4)
    assert m["f1"] == pytest.approx(0.8571, abs=1e-4)


def test_basic_metrics_perfect_and_undefined():
    assert set(M.basic_metrics(M.BinaryCounts(10, 10, 0, 0)).values()) == {1.0}
    m = M.basic_metrics(M.BinaryCounts(tp=0, tn=5, fp=2, fn=0))
    assert m["sensitivity"] is None
    assert m["precision"] == 0.0


def test_macro_metrics_examples():
    sym = M.macro_metrics(M.ConfusionMatrix(np.array([[50, 0], [0, 50]]), ("a", "b")))
    assert all(getattr(sym, k) == 1.0 for k in M.METRIC_NAMES)
    diag = M.macro_metrics(M.ConfusionMatrix(np.diag([4, 5, 6]), ("a", "b", "c")))
    assert all(getattr(diag, k) == 1.0 for k in M.METRIC_NAMES)
    r = M.macro_metrics(M.ConfusionMatrix(np.array([[10, 0, 0], [0, 10, 0], [10, 0, 0]]), ("a", "b", "c")))
    # per-class recall by brute force: class0 10/10, class1 10/10, class2 0/10
    assert r.sensitivity == pytest.approx(2 / 3)
    assert r.averaging == "macro_ovr"
    # class 2 is never predicted, so its precision is undefined and excluded
    assert r.precision == pytest.approx((10 / 20 + 1.0) / 2)
    assert any("precision" in n for n in r.notes)


def test_micro_average_option():
    cm = M.ConfusionMatrix(np.array([[10, 0, 0], [0, 10, 0], [10, 0, 0]]), ("a", "b", "c"))
    r = M.macro_metrics(cm, average="micro")
    assert r.averaging == "micro_ovr"
    assert r.sensitivity == pytest.approx(20 / 30)


def test_roc_auc_examples():
    assert M.roc_auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0])[1] == pytest.approx(0.75)
    assert M.roc_auc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0])[1] == 1.0
    assert M.roc_auc([0.5] * 6, [1, 0, 1, 0, 1, 0])[1] == 0.5
    with pytest.raises(M.AUCUndefined):
        M.roc_auc([0.1, 0.2], [1, 1])


def test_roc_curve_shape():
    curve, _ = M.roc_auc([0.1, 0.4, 0.35, 0.8, 0.35], [0, 0, 1, 1, 0])
    assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0)
    assert (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)


def test_multiclass_auc_examples():
    y = [0, 1, 2, 0, 1, 2]
    assert M.multiclass_auc(np.eye(3)[y], y)[0] == 1.0
    assert M.multiclass_auc(np.full((6, 3), 1 / 3), y)[0] == 0.5
    p = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.3, 0.3, 0.4],
                  [0.3, 0.4, 0.3], [0.5, 0.2, 0.3], [0.1, 0.6, 0.3]])
    y = [0, 1, 2, 0, 1, 2]
    oracle = np.mean([pairwise_auc(p[:, c], [v == c for v in y]) for c in range(3)])
    assert M.multiclass_auc(p, y)[0] == pytest.approx(oracle, abs=1e-12)


def test_multiclass_auc_skips_absent_class():
    auc, skipped = M.multiclass_auc(np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1]]), [0, 1])
    assert skipped == [2]
    assert auc == 1.0


def test_argmax_tie_goes_to_lowest_index():
    assert M.predicted_labels([[0.5, 0.5], [0.2, 0.8]]).tolist() == [0, 1]


def test_write_outputs(tmp_path):
    p = np.array([[0.8, 0.2], [0.3, 0.7], [0.6, 0.4], [0.1, 0.9]])
    rep = M.write_outputs(tmp_path, p, [0, 1, 1, 1], ("Normal", "Pneumonia"))
    saved = json.loads((tmp_path / "metrics.json").read_text())
    assert saved["accuracy"] == rep.accuracy == 0.75
    assert (tmp_path / "confusion.csv").read_text().splitlines()[1:] == ["Normal,1,0", "Pneumonia,1,2"]
    assert (tmp_path / "roc.csv").read_text().startswith("fpr,tpr,threshold\n")


# -- properties ---------------------------------------------------------------

labels_and_preds = st.integers(2, 3).flatmap(lambda k: st.tuples(
    st.just(k),
    st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=500)))


@settings(max_examples=150, deadline=None)
@given(labels_and_preds)
def test_permutation_invariance(data):
    k, pairs = data
    t, p = zip(*pairs)
    cm1 = M.confusion(t, p, k)
    rng = np.random.default_rng(len(pairs))
    idx = rng.permutation(len(pairs))
    cm2 = M.confusion(np.array(t)[idx], np.array(p)[idx], k)
    assert M.macro_metrics(cm1).to_dict() == M.macro_metrics(cm2).to_dict()
    assert cm1.support() == [sum(1 for v in t if v == c) for c in range(k)]


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=200))
def test_f1_is_harmonic_mean_and_swap_symmetry(pairs):
    t, p = zip(*pairs)
    cm = M.confusion(t, p, 2)
    m = M.basic_metrics(M.binary_counts(cm, 1))
    if m["precision"] and m["sensitivity"]:
        hm = 2 * m["precision"] * m["sensitivity"] / (m["precision"] + m["sensitivity"])
        assert m["f1"] == pytest.approx(hm, rel=1e-12)
    swapped = M.basic_metrics(M.binary_counts(cm, 0))
    assert swapped["sensitivity"] == m["specificity"]
    assert swapped["specificity"] == m["sensitivity"]


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6).map(lambda v: v / 6), st.booleans()), min_size=2, max_size=60))
def test_auc_swap_maps_to_complement(rows):
    s, y = zip(*rows)
    if len(set(y)) < 2:
        return
    a = M.roc_auc(s, y)[1]
    b = M.roc_auc(s, [not v for v in y])[1]
    assert a + b == pytest.approx(1.0, abs=1e-12)
