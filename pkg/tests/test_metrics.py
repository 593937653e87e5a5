import json

import numpy as np
import pytest

from plantscan.metrics import ConfusionMatrix, MetricsBundle, confusion, precision_recall


def test_confusion_identity():
    cm = confusion([0, 1, 2, 3], [0, 1, 2, 3], 4)
    assert np.array_equal(cm.counts, np.eye(4, dtype=np.int64))


def test_confusion_empty():
    cm = confusion([], [], 3)
    assert np.array_equal(cm.counts, np.zeros((3, 3), dtype=np.int64))
    assert cm.total() == 0


def test_confusion_rows_are_truth():
    cm = confusion([0, 0, 1], [1, 1, 0], 2)
    assert cm.counts[0, 1] == 2 and cm.counts[1, 0] == 1
    assert cm.counts[0, 0] == 0


def test_confusion_rejects_out_of_range():
    with pytest.raises(ValueError):
        confusion([0, 4], [0, 0], 4)
    with pytest.raises(ValueError):
        confusion([0, 0], [-1, 0], 4)


def test_confusion_hand_counted_fixture():
    labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3]
    preds = [0, 0, 1, 0, 3, 1, 1, 2, 1, 2, 2, 2, 0, 2, 2, 3, 3, 3, 3, 1]
    cm = confusion(labels, preds, 4)
    expected = np.array([
        [3, 1, 0, 1],
        [0, 3, 1, 0],
        [1, 0, 5, 0],
        [0, 1, 0, 4],
    ])
    assert np.array_equal(cm.counts, expected)
    assert cm.total() == 20
    assert cm.accuracy() == 15 / 20


def test_confusion_order_invariance():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, 50)
    preds = rng.integers(0, 4, 50)
    cm1 = confusion(labels, preds, 4)
    perm = rng.permutation(50)
    cm2 = confusion(labels[perm], preds[perm], 4)
    assert np.array_equal(cm1.counts, cm2.counts)


def test_precision_recall_identity_matrix():
    cm = confusion([0, 1, 2, 3], [0, 1, 2, 3], 4)
    per = precision_recall(cm, "per_class")
    assert all(p == 1.0 and r == 1.0 for p, r in per)
    assert precision_recall(cm, "macro") == (1.0, 1.0)


def test_precision_recall_binary_known():
    cm = ConfusionMatrix(np.array([[3, 1], [0, 4]], dtype=np.int64), ["a", "b"])
    per = precision_recall(cm, "per_class")
    assert per[0] == (1.0, 0.75)
    assert per[1] == (0.8, 1.0)


def test_micro_equals_accuracy():
    rng = np.random.default_rng(1)
    for _ in range(5):
        labels = rng.integers(0, 4, 40)
        preds = rng.integers(0, 4, 40)
        cm = confusion(labels, preds, 4)
        micro_p, micro_r = precision_recall(cm, "micro")
        assert micro_p == pytest.approx(cm.accuracy())
        assert micro_r == pytest.approx(cm.accuracy())


def test_undefined_classes_excluded_with_warning():
    # class 2 never predicted and never true: precision and recall undefined
    cm = ConfusionMatrix(np.array([[2, 0, 0], [1, 3, 0], [0, 0, 0]], dtype=np.int64),
                         ["a", "b", "c"])
    with pytest.warns(UserWarning):
        per = precision_recall(cm, "per_class")
    assert per[2] == (None, None)
    with pytest.warns(UserWarning):
        macro_p, macro_r = precision_recall(cm, "macro")
    assert macro_p == pytest.approx((2 / 3 + 1.0) / 2)
    assert macro_r == pytest.approx((1.0 + 0.75) / 2)


def test_empty_matrix_rejected():
    cm = ConfusionMatrix(np.zeros((3, 3), dtype=np.int64), ["a", "b", "c"])
    with pytest.raises(ValueError):
        precision_recall(cm)


def test_all_values_in_unit_interval():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 4, 100)
    preds = rng.integers(0, 4, 100)
    cm = confusion(labels, preds, 4)
    for p, r in precision_recall(cm, "per_class"):
        assert p is None or 0.0 <= p <= 1.0
        assert r is None or 0.0 <= r <= 1.0


def test_bundle_json_schema():
    cm = confusion([0, 1, 1, 0], [0, 1, 0, 0], 2, class_names=["x", "y"])
    bundle = MetricsBundle(accuracy=0.75, loss=0.4, cm=cm)
    doc = json.loads(bundle.to_json())
    assert doc["accuracy"] == 0.75
    assert doc["averaging"] == "macro"
    assert set(doc["per_class"]) == {"x", "y"}
    assert "precision" in doc["macro"] and "recall" in doc["micro"]
    assert doc["confusion_matrix"] == [[2, 0], [1, 1]]
