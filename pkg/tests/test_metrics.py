import numpy as np
import pytest

from pointstack.metrics import (
    MetricReport,
    classification_report,
    instance_miou,
    masked_part_prediction,
    overall_accuracy,
    part_iou,
    per_class_accuracy,
)


class TestClassification:
    def test_three_of_four(self):
        assert overall_accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75

    def test_macc_example(self):
        rep = classification_report([0, 0, 1, 0], [0, 0, 1, 1], 2)
        assert rep.oa == 0.75 and rep.macc == 0.75
        assert rep.per_class_acc == [1.0, 0.5]

    @pytest.mark.parametrize("c", [2, 3, 7])
    def test_all_zero_on_balanced_set(self, c):
        target = np.repeat(np.arange(c), 5)
        rep = classification_report(np.zeros_like(target), target, c)
        assert rep.oa == pytest.approx(1 / c) and rep.macc == pytest.approx(1 / c)

    def test_absent_classes_excluded(self):
        acc = per_class_accuracy([0, 0], [0, 0], 3)
        assert acc[0] == 1.0 and np.isnan(acc[1:]).all()
        assert classification_report([0, 0], [0, 0], 3).macc == 1.0

    def test_order_invariant(self):
        rng = np.random.default_rng(0)
        p, t = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
        perm = rng.permutation(100)
        a, b = classification_report(p, t, 4), classification_report(p[perm], t[perm], 4)
        assert a.oa == b.oa and a.macc == pytest.approx(b.macc, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            overall_accuracy([], [])

    def test_report_range_checked(self):
        with pytest.raises(ValueError):
            MetricReport(1.5, 0.5, [0.5], 1)


class TestSegmentation:
    parts = {0: [0, 1], 1: [2, 3, 4]}

    def test_perfect_prediction(self):
        targets = [np.array([0, 1, 1]), np.array([2, 2, 4])]
        assert instance_miou(targets, targets, [0, 1], self.parts) == 1.0

    def test_mutually_absent_part_counts_as_one(self):
        # part 3 appears in neither prediction nor target
        assert part_iou([2, 4], [2, 4], [2, 3, 4]) == 1.0

    def test_hand_computed(self):
        # part 0: inter 1, union 2 -> 0.5; part 1: inter 1, union 2 -> 0.5
        assert part_iou([0, 0, 1], [0, 1, 1], [0, 1]) == pytest.approx(0.5)

    def test_all_wrong_single_part(self):
        assert part_iou([1, 1], [0, 0], [0, 1]) == 0.0

    def test_mean_over_instances(self):
        preds = [np.array([0, 0]), np.array([2, 3])]
        targets = [np.array([0, 0]), np.array([2, 2])]
        # second: part2 1/2, part3 0, part4 absent -> 1
        expected = np.mean([1.0, np.mean([0.5, 0.0, 1.0])])
        assert instance_miou(preds, targets, [0, 1], self.parts) == pytest.approx(expected)

    def test_masked_prediction_stays_in_category(self):
        logits = np.array([[9.0, 0.0, 1.0, 2.0, 0.0]])
        np.testing.assert_array_equal(masked_part_prediction(logits, [2, 3, 4]), [3])

    def test_empty(self):
        with pytest.raises(ValueError):
            instance_miou([], [], [], self.parts)
