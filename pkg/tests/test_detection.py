"""Window regression, IoU, anchors, NMS, crop-and-resize, and the mAP evaluator."""

import math

import numpy as np
import pytest

from hcn import detection as det
from hcn import ops
from hcn.tensor import Tensor


class TestEncodeDecode:
    def test_identity_when_window_equals_anchor(self):
        a = det.TemporalWindow(center=100.0, length=50.0)
        assert det.encode_window(a, a) == (0.0, 0.0)

    def test_textbook_case(self):
        anchor = det.TemporalWindow(center=100.0, length=50.0)
        window = det.TemporalWindow(center=110.0, length=100.0)
        tx, tw = det.encode_window(window, anchor)
        assert abs(tx - 0.2) < 1e-12
        assert abs(tw - math.log(2.0)) < 1e-12

    def test_roundtrip_inverse(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            anchor = det.TemporalWindow(rng.uniform(0, 500), rng.uniform(5, 400))
            window = det.TemporalWindow(rng.uniform(0, 500), rng.uniform(5, 400))
            back = det.decode_window(det.encode_window(window, anchor), anchor)
            assert abs(back.center - window.center) < 1e-12
            assert abs(back.length - window.length) < 1e-12

    def test_nonpositive_length_rejected(self):
        with pytest.raises(ValueError):
            det.TemporalWindow(center=10.0, length=0.0)
        with pytest.raises(ValueError):
            det.encode_targets(np.array([[5.0, -1.0]]), np.array([[5.0, 2.0]]))


class TestTemporalIou:
    def test_identical(self):
        w = det.TemporalWindow.from_range(10, 60)
        assert det.temporal_iou(w, w) == 1.0

    def test_disjoint(self):
        a = det.TemporalWindow.from_range(0, 10)
        b = det.TemporalWindow.from_range(20, 30)
        assert det.temporal_iou(a, b) == 0.0

    def test_half_overlap_fixture(self):
        a = det.TemporalWindow.from_range(0, 100)
        b = det.TemporalWindow.from_range(50, 150)
        assert abs(det.temporal_iou(a, b) - 1.0 / 3.0) < 1e-12

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = det.TemporalWindow(rng.uniform(0, 100), rng.uniform(1, 100))
            b = det.TemporalWindow(rng.uniform(0, 100), rng.uniform(1, 100))
            iou_ab = det.temporal_iou(a, b)
            assert 0.0 <= iou_ab <= 1.0
            assert iou_ab == det.temporal_iou(b, a)
            same = abs(a.start - b.start) < 1e-12 and abs(a.end - b.end) < 1e-12
            assert (iou_ab == 1.0) == same


class TestAnchors:
    def test_counting_fixture(self):
        anchors = det.generate_anchors(400, 4, (50, 100, 200, 400))
        assert anchors.positions == 100
        assert len(anchors) == 400

    def test_first_center_and_scales(self):
        anchors = det.generate_anchors(64, 4, (50, 100))
        assert anchors.windows[0, 0] == 2.0  # 0.5 * stride
        assert set(np.unique(anchors.windows[:, 1])) == {50.0, 100.0}

    def test_position_major_order(self):
        anchors = det.generate_anchors(16, 4, (8, 16))
        np.testing.assert_array_equal(anchors.windows[0], [2.0, 8.0])
        np.testing.assert_array_equal(anchors.windows[1], [2.0, 16.0])
        np.testing.assert_array_equal(anchors.windows[2], [6.0, 8.0])


class TestAssignLabels:
    def test_exact_match_positive_with_zero_target(self):
        anchors = np.array([[50.0, 100.0]])
        labels, targets, classes = det.assign_anchor_labels(anchors, [(0, 100, 2)])
        assert labels[0] == 1
        np.testing.assert_allclose(targets[0], [0.0, 0.0], atol=1e-15)
        assert classes[0] == 2

    def test_disjoint_negative(self):
        anchors = np.array([[500.0, 20.0]])
        labels, _, _ = det.assign_anchor_labels(anchors, [(0, 100, 0)])
        assert labels[0] == 0

    def test_three_anchor_rule_application(self):
        # IoUs with the single segment [0, 100): 0.8, 0.5, ~0.1
        anchors = np.array(
            [
                [50.0, 80.0],  # [10, 90] -> IoU 0.8
                [25.0, 50.0],  # [0, 50]  -> IoU 0.5
                [95.0, 30.0],  # [80, 110]-> IoU 20/110
            ]
        )
        labels, _, _ = det.assign_anchor_labels(anchors, [(0, 100, 1)], pos_iou=0.7, neg_iou=0.3)
        assert labels[0] == 1
        assert labels[1] == -1  # between thresholds: ignored
        assert labels[2] == 0

    def test_best_anchor_fallback(self):
        # no anchor reaches pos_iou, the best one is still positive
        anchors = np.array([[50.0, 30.0], [200.0, 30.0]])
        labels, _, classes = det.assign_anchor_labels(anchors, [(40, 100, 3)], pos_iou=0.7)
        assert labels[0] == 1 and classes[0] == 3


class TestNms:
    def test_single_window_kept(self):
        kept = det.nms_temporal(np.array([[0.0, 10.0]]), np.array([0.5]), 0.5)
        assert kept == [0]

    def test_duplicate_suppressed(self):
        spans = np.array([[0.0, 10.0], [0.0, 10.0]])
        kept = det.nms_temporal(spans, np.array([0.9, 0.8]), 0.5)
        assert kept == [0]

    def test_chain_case(self):
        # middle overlaps both ends at IoU 0.6; ends are disjoint
        spans = np.array([[0.0, 10.0], [2.5, 12.5], [5.0, 15.0]])
        ious = det.iou_matrix(spans, spans)
        assert abs(ious[0, 1] - 0.6) < 1e-12 and abs(ious[1, 2] - 0.6) < 1e-12
        kept = det.nms_temporal(spans, np.array([0.9, 0.7, 0.8]), 0.5)
        assert kept == [0, 2]

    def test_no_two_kept_windows_overlap_above_threshold(self):
        rng = np.random.default_rng(2)
        starts = rng.uniform(0, 200, size=40)
        spans = np.stack([starts, starts + rng.uniform(5, 60, size=40)], axis=1)
        scores = rng.uniform(0, 1, size=40)
        kept = det.nms_temporal(spans, scores, 0.4)
        for i in kept:
            for j in kept:
                if i != j:
                    assert det.iou_matrix(spans[i : i + 1], spans[j : j + 1])[0, 0] <= 0.4


class TestCropAndResize:
    def test_single_proposal_wrapper_identity(self):
        f = np.random.default_rng(3).normal(size=(2, 6, 3))
        win = det.TemporalWindow.from_range(0.0, 6.0)
        out = det.crop_and_resize_temporal(Tensor(f), win, 6)
        np.testing.assert_array_equal(out.data, f)


class TestEvaluateMap:
    def test_perfect_detector(self):
        truth = {"a": [(0, 50, 0), (100, 160, 1)]}
        dets = {
            "a": [
                det.TemporalWindow.from_range(0, 50, score=1.0, class_id=0),
                det.TemporalWindow.from_range(100, 160, score=1.0, class_id=1),
            ]
        }
        per_class, mean_ap = det.evaluate_map(dets, truth)
        assert mean_ap == 1.0
        assert per_class == {0: 1.0, 1: 1.0}

    def test_no_detections(self):
        truth = {"a": [(0, 50, 0)]}
        _, mean_ap = det.evaluate_map({"a": []}, truth)
        assert mean_ap == 0.0

    def test_hand_computed_pr_fixture(self):
        # one class, two groundtruth, detections hit@0.9, miss@0.8, hit@0.7
        truth = {"a": [(0, 100, 0), (200, 300, 0)]}
        dets = {
            "a": [
                det.TemporalWindow.from_range(0, 100, score=0.9, class_id=0),
                det.TemporalWindow.from_range(400, 500, score=0.8, class_id=0),
                det.TemporalWindow.from_range(200, 300, score=0.7, class_id=0),
            ]
        }
        per_class, mean_ap = det.evaluate_map(dets, truth)
        assert abs(per_class[0] - 5.0 / 6.0) < 1e-12
        assert abs(mean_ap - 5.0 / 6.0) < 1e-12

    def test_empty_groundtruth_rejected(self):
        with pytest.raises(ValueError):
            det.evaluate_map({"a": []}, {"a": []})

    def test_monotone_score_transform_invariance(self):
        rng = np.random.default_rng(4)
        truth = {
            "a": [(0, 60, 0), (100, 180, 1), (250, 300, 0)],
            "b": [(20, 90, 1)],
        }
        windows = {}
        for seq in ("a", "b"):
            ws = []
            for _ in range(12):
                start = rng.uniform(0, 280)
                ws.append(
                    det.TemporalWindow.from_range(
                        start,
                        start + rng.uniform(20, 100),
                        score=float(rng.uniform(0.01, 0.99)),
                        class_id=int(rng.integers(0, 2)),
                    )
                )
            windows[seq] = ws
        _, base = det.evaluate_map(windows, truth)

        def transform(s):  # strictly increasing
            return 1.0 / (1.0 + math.exp(-(3.0 * s + 0.5)))

        mapped = {
            seq: [
                det.TemporalWindow(w.center, w.length, transform(w.score), w.class_id)
                for w in ws
            ]
            for seq, ws in windows.items()
        }
        _, same = det.evaluate_map(mapped, truth)
        assert abs(base - same) < 1e-12

    def test_duplicate_detections_count_as_false_positives(self):
        truth = {"a": [(0, 100, 0)]}
        dets = {
            "a": [
                det.TemporalWindow.from_range(0, 100, score=0.9, class_id=0),
                det.TemporalWindow.from_range(1, 101, score=0.8, class_id=0),
            ]
        }
        per_class, _ = det.evaluate_map(dets, truth)
        assert per_class[0] == 1.0  # the duplicate only adds a trailing FP
