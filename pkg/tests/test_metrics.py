import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from sackit.errors import ParameterError, ShapeError
from sackit.metrics import (
    ConfusionCounts,
    MetricValues,
    aggregate,
    binarize,
    compute_metrics,
    confusion,
    dataset_metrics,
    metrics_csv,
    pooled_counts,
)

mask_shapes = st.tuples(st.integers(1, 6), st.integers(1, 6))


def _pixel_oracle(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def test_binarize_examples():
    assert binarize(np.full((2, 2), 0.9), 0.5).tolist() == [[1, 1], [1, 1]]
    assert binarize(np.array([0.4, 0.5, 0.6]), 0.5).tolist() == [0, 0, 1]
    assert not binarize(np.linspace(0, 0.99, 50), 0.999).any()
    for bad in (0.0, 1.0, -0.2, 2.0):
        with pytest.raises(ParameterError):
            binarize(np.zeros(3), bad)


def test_confusion_examples():
    gt = np.zeros((4, 4), np.uint8)
    pred = np.zeros((4, 4), np.uint8)
    for r, c in [(0, 0), (0, 1), (1, 1)]:
        pred[r, c] = 1
    for r, c in [(0, 1), (1, 1), (2, 2)]:
        gt[r, c] = 1
    assert confusion(pred, gt) == ConfusionCounts(2, 1, 1, 12)
    same = confusion(gt, gt)
    assert same.fp == same.fn == 0
    empty = confusion(np.zeros_like(gt), gt)
    assert empty.tp == empty.fp == 0
    with pytest.raises(ShapeError):
        confusion(np.zeros(3), np.zeros(4))


def test_compute_metrics_examples():
    m = compute_metrics(ConfusionCounts(2, 1, 1, 12))
    assert (m.precision, m.recall, m.f1, m.iou) == pytest.approx((2 / 3, 2 / 3, 2 / 3, 0.5))
    assert compute_metrics(ConfusionCounts(5, 0, 0, 3)) == MetricValues(1.0, 1.0, 1.0, 1.0)
    assert compute_metrics(ConfusionCounts(0, 0, 0, 9)) == MetricValues(1.0, 1.0, 1.0, 1.0)
    assert compute_metrics(ConfusionCounts(0, 3, 0, 9)) == MetricValues(0.0, 0.0, 0.0, 0.0)
    assert compute_metrics(ConfusionCounts(0, 0, 2, 9)) == MetricValues(0.0, 0.0, 0.0, 0.0)
    with pytest.raises(ParameterError):
        ConfusionCounts(-1, 0, 0, 0)


@settings(max_examples=200)
@given(st.data(), mask_shapes)
def test_counts_and_ratios_match_pixel_oracle(data, shape):
    pred = data.draw(hnp.arrays(np.uint8, shape, elements=st.integers(0, 1)))
    gt = data.draw(hnp.arrays(np.uint8, shape, elements=st.integers(0, 1)))
    c = confusion(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == _pixel_oracle(pred, gt)
    assert c.total == pred.size
    m = compute_metrics(c)
    if c.tp:
        assert abs(m.precision - c.tp / (c.tp + c.fp)) <= 1e-12
        assert abs(m.recall - c.tp / (c.tp + c.fn)) <= 1e-12
        assert abs(m.iou - c.tp / (c.tp + c.fp + c.fn)) <= 1e-12
    assert abs(m.f1 - 2 * m.iou / (1 + m.iou)) <= 1e-12
    assert m.f1 >= m.iou


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_f1_equals_iou_only_at_zero_or_one(tp, fp, fn):
    m = compute_metrics(ConfusionCounts(tp, fp, fn, 0))
    if m.f1 == m.iou:
        assert m.iou in (0.0, 1.0)


@given(hnp.arrays(np.float64, (5, 5), elements=st.floats(0, 1)), st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_binarize_monotone_in_tau(prob, tau, step):
    low = binarize(prob, tau)
    high = binarize(prob, min(tau + step, 0.999))
    assert np.all(high <= low)


@settings(max_examples=60)
@given(st.data(), st.integers(1, 6), st.integers(1, 5))
def test_pooling_is_shard_invariant(data, n, cut):
    preds = [data.draw(hnp.arrays(np.uint8, (3, 3), elements=st.integers(0, 1))) for _ in range(n)]
    gts = [data.draw(hnp.arrays(np.uint8, (3, 3), elements=st.integers(0, 1))) for _ in range(n)]
    cut = min(cut, n)
    whole = pooled_counts(preds, gts)
    sharded = pooled_counts(preds[:cut], gts[:cut]) + pooled_counts(preds[cut:], gts[cut:])
    assert whole == sharded
    assert dataset_metrics(preds, gts) == compute_metrics(whole)


def test_macro_mode_averages_images():
    preds = [np.array([1, 0]), np.array([0, 0])]
    gts = [np.array([1, 0]), np.array([1, 0])]
    assert dataset_metrics(preds, gts, "macro").f1 == pytest.approx(0.5)
    assert dataset_metrics(preds, gts, "micro").f1 == pytest.approx(2 / 3)
    with pytest.raises(ParameterError):
        dataset_metrics(preds, gts, "weighted")
    with pytest.raises(ParameterError):
        dataset_metrics([], [])
    with pytest.raises(ShapeError):
        dataset_metrics(preds, gts[:1])


def _mv(f1, iou):
    return MetricValues(0.0, 0.0, f1, iou)


def test_aggregate_examples():
    agg = aggregate([("a", _mv(64.22, 47.3)), ("b", _mv(61.74, 44.68)), ("c", _mv(75.63, 60.82))])
    assert round(agg.f1_mean, 2) == 67.20 and round(agg.f1_std, 2) == 6.05
    assert round(agg.iou_mean, 2) == 50.93 and round(agg.iou_std, 2) == 7.07
    single = aggregate([("a", _mv(0.4, 0.25))])
    assert (single.f1_mean, single.f1_std) == (0.4, 0.0)
    two = aggregate([("a", _mv(0.4, 0.2)), ("b", _mv(0.6, 0.4))])
    assert two.f1_mean == pytest.approx(0.5) and two.f1_std == pytest.approx(0.1)
    with pytest.raises(ParameterError):
        aggregate([])


def test_csv_layout():
    text = metrics_csv([{"dataset": "d", "model": "m", "plan": "p", "precision": 2 / 3, "recall": 1.0,
                         "f1": 0.8, "iou": 2 / 3}])
    assert text == "dataset,model,plan,precision,recall,f1,iou\nd,m,p,66.67,100.00,80.00,66.67\n"
