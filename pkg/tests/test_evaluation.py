"""
Tests for OPE metrics and the sequence runner
"""

import csv
import math

import numpy as np
import orjson
import pytest

from lib.evaluation import (
    IOU_THRESHOLDS, EvaluationError, ModelTracker, OpeResult, box_iou, center_errors, clip_box,
    combine_results, evaluate, ope_metrics, run_sequence, write_frame_table, write_metrics_json
)
from lib.synthdata import gen_sequence
from lib.tracker import MaterialTracker


class ReplayTracker:
    """Returns the stored boxes for frames 1..T-1, optionally shifted"""

    def __init__(self, boxes, shift=0.0):
        self.boxes = np.asarray(boxes, dtype=np.float64)
        self.shift = shift
        self.frame = 0
        self.initialized = False

    def initialize(self, frame, box):
        self.initialized = True

    def track(self, frame):
        self.frame += 1
        return self.boxes[self.frame] + np.array([self.shift, 0.0, 0.0, 0.0])


def _frame_by_frame(pred, gt):
    """Per-frame scalar loops over the same definitions"""
    within, cleared = 0, [0] * 21
    for (px, py, pw, ph), (gx, gy, gw, gh) in zip(pred, gt):
        if math.hypot(px + pw / 2 - (gx + gw / 2), py + ph / 2 - (gy + gh / 2)) <= 20.0:
            within += 1
        iw = max(0.0, min(px + pw, gx + gw) - max(px, gx))
        ih = max(0.0, min(py + ph, gy + gh) - max(py, gy))
        union = pw * ph + gw * gh - iw * ih
        iou = iw * ih / union if union > 0 else 0.0
        for k in range(21):
            if iou >= k / 20.0:
                cleared[k] += 1
    frames = len(gt)
    return within / frames, sum(c / frames for c in cleared) / 21


class TestMetrics:
    def test_identical_boxes(self):
        box = np.array([[3.0, 4.0, 10.5, 7.25]])
        assert box_iou(box, box)[0] == 1.0
        assert center_errors(box, box)[0] == 0.0

    def test_partial_overlap(self):
        iou = box_iou(np.array([0.0, 0.0, 10.0, 10.0]), np.array([5.0, 0.0, 10.0, 10.0]))
        assert iou[0] == pytest.approx(50.0 / 150.0)

    def test_degenerate_boxes_give_zero(self):
        assert box_iou(np.zeros(4), np.zeros(4))[0] == 0.0

    def test_thresholds(self):
        assert len(IOU_THRESHOLDS) == 21
        assert IOU_THRESHOLDS[0] == 0.0 and IOU_THRESHOLDS[-1] == 1.0

    def test_perfect_prediction(self):
        gt = np.array([[0.0, 0.0, 8.0, 8.0], [2.0, 2.0, 8.0, 8.0]])
        result = ope_metrics(gt, gt)
        assert (result.dp, result.auc) == (1.0, 1.0)

    def test_distance_threshold_is_inclusive(self):
        gt = np.array([[0.0, 0.0, 4.0, 4.0], [0.0, 0.0, 4.0, 4.0]])
        pred = gt + np.array([[20.0, 0.0, 0.0, 0.0], [20.5, 0.0, 0.0, 0.0]])
        result = ope_metrics(pred, gt)
        assert result.dp == 0.5
        assert result.auc == pytest.approx(1.0 / 21.0)

    def test_success_counts_thresholds_met(self):
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        result = ope_metrics(np.array([[5.0, 0.0, 10.0, 10.0]]), gt)
        # IoU = 1/3 clears tau = 0.0 .. 0.3
        assert result.success[:7] == [1.0] * 7 and sum(result.success) == 7.0
        assert result.auc == pytest.approx(7.0 / 21.0)

    def test_distance_precision_hand_case(self):
        gt = np.tile([0.0, 0.0, 10.0, 10.0], (3, 1))
        pred = gt + np.array([[0.0, 0.0, 0.0, 0.0], [10.0, 0.0, 0.0, 0.0], [0.0, 30.0, 0.0, 0.0]])
        result = ope_metrics(pred, gt)
        assert result.center_errors == [0.0, 10.0, 30.0]
        assert result.dp == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_success_auc_hand_case(self):
        gt = np.tile([0.0, 0.0, 10.0, 10.0], (3, 1))
        pred = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 5.0, 10.0], [50.0, 50.0, 10.0, 10.0]])
        result = ope_metrics(pred, gt)
        assert result.ious == [1.0, 0.5, 0.0]
        assert result.auc == pytest.approx(33.0 / 63.0, abs=1e-12)

    def test_matches_frame_by_frame_reference(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            frames = int(rng.integers(1, 40))
            gt = np.column_stack([rng.uniform(0, 100, (frames, 2)), rng.uniform(1, 40, (frames, 2))])
            pred = gt + np.column_stack([rng.normal(0, 15, (frames, 2)), rng.normal(0, 4, (frames, 2))])
            pred[:, 2:] = np.maximum(pred[:, 2:], 0.5)
            result = ope_metrics(pred, gt)
            dp, auc = _frame_by_frame(pred.tolist(), gt.tolist())
            assert abs(result.dp - dp) <= 1e-12
            assert abs(result.auc - auc) <= 1e-12

    def test_mismatched_lengths(self):
        with pytest.raises(EvaluationError):
            ope_metrics(np.zeros((2, 4)), np.zeros((3, 4)))
        with pytest.raises(EvaluationError):
            ope_metrics(np.zeros((0, 4)), np.zeros((0, 4)))

    def test_combine_averages_sequences(self):
        a = OpeResult(dp=1.0, auc=1.0, center_errors=[0.0], ious=[1.0], success=[1.0] * 21)
        b = OpeResult(dp=0.0, auc=0.0, center_errors=[50.0, 60.0], ious=[0.0, 0.0], success=[0.0] * 21)
        combined = combine_results([a, b])
        assert (combined.dp, combined.auc) == (0.5, 0.5)
        assert len(combined.ious) == 3
        with pytest.raises(EvaluationError):
            combine_results([])

    def test_clip_box(self):
        np.testing.assert_array_equal(clip_box(np.array([-3.0, 40.0, 20.0, 0.2]), 48, 48), [0.0, 40.0, 20.0, 1.0])
        np.testing.assert_array_equal(clip_box(np.array([45.0, 0.0, 20.0, 5.0]), 48, 48), [45.0, 0.0, 3.0, 5.0])


class TestRunner:
    def test_first_frame_is_not_scored(self, small_sequence):
        tracker = ReplayTracker(small_sequence.boxes)
        result = run_sequence(tracker, small_sequence)
        assert tracker.initialized and tracker.frame == small_sequence.frames - 1
        assert len(result.ious) == small_sequence.frames - 1
        assert (result.dp, result.auc) == (1.0, 1.0)

    def test_single_frame_sequence_rejected(self, small_scene):
        record = gen_sequence(small_scene.model_copy(update={"frames": 1}))
        with pytest.raises(EvaluationError):
            run_sequence(ReplayTracker(record.boxes), record)

    def test_evaluate_uses_fresh_trackers(self, small_sequence):
        combined, per_sequence = evaluate(lambda: ReplayTracker(small_sequence.boxes, shift=30.0),
                                          [small_sequence, small_sequence], workers=2, names=["a", "b"])
        assert list(per_sequence) == ["a", "b"]
        assert combined.dp == 0.0
        assert combined.auc == pytest.approx(1.0 / 21.0)

    def test_outputs(self, small_sequence, tmp_path):
        combined, per_sequence = evaluate(lambda: ReplayTracker(small_sequence.boxes), [small_sequence])
        write_metrics_json(tmp_path / "metrics.json", combined, per_sequence)
        write_frame_table(tmp_path / "frames.csv", per_sequence)

        payload = orjson.loads((tmp_path / "metrics.json").read_bytes())
        assert payload["overall"] == {"dp": 1.0, "auc": 1.0, "frames": 5}
        assert len(payload["success_curve"]["thresholds"]) == 21
        assert payload["sequences"]["seq_000"]["frames"] == 5
        with open(tmp_path / "frames.csv") as handle:
            rows = list(csv.DictReader(handle))
        assert [int(r["frame"]) for r in rows] == [1, 2, 3, 4, 5]


class TestModelTracker:
    def test_track_requires_initialize(self, small_tracker_config, small_sequence):
        tracker = ModelTracker(MaterialTracker(small_tracker_config))
        with pytest.raises(EvaluationError):
            tracker.track(small_sequence.cubes[1])

    def test_predictions_stay_in_frame(self, small_tracker_config, small_sequence):
        tracker = ModelTracker(MaterialTracker(small_tracker_config))
        result = run_sequence(tracker, small_sequence)
        assert len(result.ious) == 5
        assert 0.0 <= result.dp <= 1.0 and 0.0 <= result.auc <= 1.0
        x, y, w, h = tracker.box
        assert x >= 0 and y >= 0 and w >= 1 and h >= 1
        assert x + w <= 48 and y + h <= 48
