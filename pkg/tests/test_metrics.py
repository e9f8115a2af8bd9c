from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtnet.metrics import (
    ConfusionMatrix,
    PartIoUAccumulator,
    accumulate,
    class_ious,
    mean_class_accuracy,
    mean_iou,
    overall_accuracy,
    semantic_miou,
    shape_iou,
)

# class 0: 3 of 4 correct, class 1: 1 of 2 correct
HAND = [[3, 1], [1, 1]]


def test_overall_accuracy_hand_matrix():
    cm = ConfusionMatrix(2, HAND)
    assert overall_accuracy(cm) == 4 / 6
    assert overall_accuracy(cm) == pytest.approx(0.6667, abs=5e-5)


def test_mean_class_accuracy_hand_matrix():
    assert mean_class_accuracy(ConfusionMatrix(2, HAND)) == 0.625


def test_accuracy_extremes():
    assert overall_accuracy(ConfusionMatrix(3, np.diag([2, 5, 1]))) == 1.0
    assert mean_class_accuracy(ConfusionMatrix(3, np.diag([2, 5, 1]))) == 1.0
    assert overall_accuracy(ConfusionMatrix(2, [[0, 3], [4, 0]])) == 0.0
    with pytest.raises(ValueError):
        overall_accuracy(ConfusionMatrix(2))


def test_macc_skips_absent_classes():
    cm = ConfusionMatrix(3, [[1, 1, 0], [0, 0, 0], [0, 0, 2]])
    assert mean_class_accuracy(cm) == 0.75
    with pytest.raises(ValueError):
        mean_class_accuracy(ConfusionMatrix(3))


def test_accumulate_single_and_empty():
    cm = ConfusionMatrix(3)
    accumulate(cm, [], [])
    assert cm.total == 0
    accumulate(cm, [2], [1])
    assert cm.counts[2, 1] == 1 and cm.total == 1


def test_accumulate_rejects_bad_labels():
    with pytest.raises(ValueError):
        ConfusionMatrix(2).accumulate([0, 2], [0, 1])
    with pytest.raises(ValueError):
        ConfusionMatrix(2).accumulate([0], [0, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60),
       st.integers(0, 60))
def test_shard_merge_equals_single_pass(pairs, cut):
    t, p = map(list, zip(*pairs))
    whole = ConfusionMatrix(4).accumulate(t, p)
    merged = ConfusionMatrix(4).accumulate(t[:cut], p[:cut]).merge(
        ConfusionMatrix(4).accumulate(t[cut:], p[cut:]))
    np.testing.assert_array_equal(whole.counts, merged.counts)
    assert overall_accuracy(whole) == overall_accuracy(merged)
    assert mean_class_accuracy(whole) == mean_class_accuracy(merged)
    assert 0 <= overall_accuracy(whole) <= 1


def test_semantic_miou_hand_matrix():
    cm = ConfusionMatrix(2, [[3, 1], [1, 3]])
    assert class_ious(cm) == [Fraction(3, 5), Fraction(3, 5)]
    per, miou = semantic_miou(cm)
    assert per == [0.6, 0.6] and miou == 0.6


def test_semantic_mean_iou_from_labels():
    t = [0, 0, 0, 0, 1, 1, 1, 1]
    p = [0, 0, 0, 1, 0, 1, 1, 1]
    assert mean_iou(t, p, num_classes=2)[1] == 0.6


def test_swapped_parts_shape_iou_is_zero():
    assert shape_iou([0] * 5, [1] * 5, [0, 1]) == 0


def test_part_absent_from_both_scores_one():
    assert shape_iou([0, 0], [0, 0], [0, 1]) == 1
    assert shape_iou([0, 1], [0, 0], [0, 1]) == Fraction(1, 2) * (Fraction(1, 2) + 0)


def test_perfect_part_prediction():
    per, miou = mean_iou([[0, 1, 1], [2, 2]], [[0, 1, 1], [2, 2]], categories=[0, 1],
                         category_parts=[[0, 1], [2, 3]])
    assert per == {0: 1.0, 1: 1.0} and miou == 1.0


def test_part_category_and_instance_means():
    acc = PartIoUAccumulator([[0, 1], [2]])
    acc.add(0, [0, 0], [1, 1])    # 0
    acc.add(0, [0, 1], [0, 1])    # 1
    acc.add(1, [2, 2], [2, 2])    # 1
    per, miou = acc.result()
    assert per == {0: 0.5, 1: 1.0}
    assert miou == float(Fraction(2, 3))


def test_part_accumulator_merge_and_errors():
    a, b = PartIoUAccumulator([[0, 1]]), PartIoUAccumulator([[0, 1]])
    a.add(0, [0, 1], [0, 0])
    b.add(0, [1, 1], [1, 1])
    one = PartIoUAccumulator([[0, 1]])
    one.add(0, [0, 1], [0, 0])
    one.add(0, [1, 1], [1, 1])
    assert a.merge(b).result() == one.result()
    with pytest.raises(ValueError, match="unknown category"):
        a.add(3, [0], [0])
    with pytest.raises(ValueError):
        PartIoUAccumulator([[0]]).result()
