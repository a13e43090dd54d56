import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsclab.metrics import confusion_matrix, forgetting_pace, grouped_miou, iou_per_class


def test_diagonal():
    np.testing.assert_array_equal(iou_per_class(np.diag([3, 0, 5])), [1.0, np.nan, 1.0])


def test_brute_force_sets():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 4, size=300)
    pred = rng.integers(0, 4, size=300)
    got = iou_per_class(confusion_matrix(gt, pred, 4))
    for c in range(4):
        a = {i for i in range(300) if gt[i] == c}
        b = {i for i in range(300) if pred[i] == c}
        assert got[c] == pytest.approx(len(a & b) / len(a | b))


def test_out_of_range_gt_skipped():
    cm = confusion_matrix(np.array([0, 1, 255]), np.array([0, 1, 1]), 2)
    assert cm.sum() == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_order_independent_and_mergeable(seed):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, 5, size=(2, 64))
    cm = confusion_matrix(gt, pred, 5)
    perm = rng.permutation(64)
    assert np.array_equal(cm, confusion_matrix(gt[perm], pred[perm], 5))
    assert np.array_equal(cm, confusion_matrix(gt[:20], pred[:20], 5) + confusion_matrix(gt[20:], pred[20:], 5))
    ious = iou_per_class(cm)
    ok = ~np.isnan(ious)
    assert np.all((ious[ok] >= 0) & (ious[ok] <= 1))


def test_grouped_example():
    g = grouped_miou([0.5, 0.7, 0.9], [2, 3])
    assert g == {"initial": pytest.approx(0.6), "incremental": pytest.approx(0.9), "all": pytest.approx(0.7)}


def test_grouped_single_step():
    g = grouped_miou([0.2, 0.4], [2])
    assert g["incremental"] is None and g["initial"] == g["all"]


def test_grouped_skips_absent():
    g = grouped_miou([0.5, np.nan, 0.9], [2, 3])
    assert g["initial"] == 0.5 and g["all"] == pytest.approx(0.7)


def test_grouped_invariant_to_class_permutation_within_groups():
    ious = np.array([0.1, 0.4, 0.6, 0.3, 0.8])
    a = grouped_miou(ious, [3, 5])
    b = grouped_miou(ious[[0, 2, 1, 4, 3]], [3, 5])
    for k in a:
        assert a[k] == pytest.approx(b[k])


def test_forgetting():
    pace = forgetting_pace([0.9, 0.8, 0.5], [0.9, 0.6, 0.7, 0.4])
    np.testing.assert_allclose(pace[:3], [0.0, 0.2, -0.2])
    assert np.isnan(pace[3])
