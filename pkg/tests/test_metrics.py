"""Evaluation tests: the pooled AP is compared against a from-scratch
pure-Python reference on hundreds of small random scene sets, plus targeted
checks of the matching, interpolation and pooling conventions."""

import math

import numpy as np
import pytest

from pgfusion.detection import DetectionSet
from pgfusion.harness.metrics import THRESHOLDS, evaluate, match_and_ap
from pgfusion.scene import Box7


def _box(cx, cy, class_id, score=1.0, cz=0.0, l=1.0, w=1.0, h=1.0, yaw=0.0):
    return Box7(
        cx=cx, cy=cy, cz=cz, l=l, w=w, h=h, yaw=yaw, class_id=class_id, score=score
    )


def _dets(boxes):
    return DetectionSet(boxes=list(boxes), provenance=None)


# -- reference implementation, written independently of the library code --


def _ref_interp(x, xs, ys):
    """Piecewise-linear lookup matching np.interp(..., right=0.0): clamp to
    ys[0] on the left, zero strictly beyond xs[-1], and at a repeated
    abscissa take the last entry."""
    if x > xs[-1]:
        return 0.0
    if x < xs[0]:
        return ys[0]
    j = max(i for i in range(len(xs)) if xs[i] <= x)
    if xs[j] == x:
        return ys[j]
    t = (x - xs[j]) / (xs[j + 1] - xs[j])
    return ys[j] + t * (ys[j + 1] - ys[j])


def _ref_ap(dets_by_scene, gts_by_scene, class_id, dist):
    """Greedy matching and 101-point interpolated AP, in plain loops."""
    pooled = []
    for si, dets in enumerate(dets_by_scene):
        for b in dets.boxes:
            if b.class_id == class_id:
                key = (-b.score, b.class_id, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw)
                pooled.append((key, si, b))
    pooled.sort(key=lambda item: item[0])
    gt_pool = [
        [b for b in boxes if b.class_id == class_id] for boxes in gts_by_scene
    ]
    n_pos = sum(len(g) for g in gt_pool)
    used = [set() for _ in gts_by_scene]
    rec, prec = [], []
    n_tp = 0
    for rank, (_, si, det) in enumerate(pooled):
        best, best_d = None, dist
        for gi, gt in enumerate(gt_pool[si]):
            if gi in used[si]:
                continue
            d = math.hypot(det.cx - gt.cx, det.cy - gt.cy)
            if d < best_d:
                best, best_d = gi, d
        if best is not None:
            used[si].add(best)
            n_tp += 1
        rec.append(n_tp / n_pos if n_pos else 0.0)
        prec.append(n_tp / (rank + 1))
    if n_pos == 0 or not pooled:
        return 0.0
    total = 0.0
    for i in range(11, 101):
        p = _ref_interp(i / 100.0, rec, prec) - 0.1
        total += max(p, 0.0)
    return total / 90.0 / 0.9


def _random_scenes(rng, n_scenes, n_classes=3):
    """Small scene sets with deliberate score ties, exact-duplicate boxes
    and center distances straddling every threshold."""
    dets, gts = [], []
    for _ in range(n_scenes):
        gt = [
            _box(
                rng.uniform(0.0, 8.0),
                rng.uniform(0.0, 8.0),
                int(rng.integers(1, n_classes + 1)),
            )
            for _ in range(rng.integers(0, 7))
        ]
        boxes = []
        for _ in range(rng.integers(0, 9)):
            if gt and rng.random() < 0.7:
                anchor = gt[rng.integers(0, len(gt))]
                r = rng.uniform(0.0, 5.0)
                phi = rng.uniform(0.0, 2.0 * math.pi)
                cx = anchor.cx + r * math.cos(phi)
                cy = anchor.cy + r * math.sin(phi)
                cls = anchor.class_id if rng.random() < 0.8 else int(
                    rng.integers(1, n_classes + 1)
                )
            else:
                cx, cy = rng.uniform(-2.0, 10.0), rng.uniform(-2.0, 10.0)
                cls = int(rng.integers(1, n_classes + 1))
            score = 0.5 if rng.random() < 0.3 else float(rng.uniform(0.05, 1.0))
            boxes.append(_box(cx, cy, cls, score=score))
        if boxes and rng.random() < 0.3:
            boxes.append(boxes[rng.integers(0, len(boxes))])
        dets.append(_dets(boxes))
        gts.append(gt)
    return dets, gts


def test_ap_matches_reference_on_random_scenes():
    rng = np.random.default_rng(42)
    for _ in range(200):
        dets, gts = _random_scenes(rng, int(rng.integers(1, 4)))
        result = evaluate(dets, gts, 3)
        for k in range(3):
            for t, dist in enumerate(THRESHOLDS):
                ref = _ref_ap(dets, gts, k + 1, dist)
                assert abs(result.ap[k, t] - ref) < 1e-12


def test_single_scene_matches_reference():
    rng = np.random.default_rng(7)
    for _ in range(50):
        dets, gts = _random_scenes(rng, 1)
        for dist in THRESHOLDS:
            got = match_and_ap(dets[0], gts[0], 2, dist)
            assert abs(got - _ref_ap(dets, gts, 2, dist)) < 1e-12


def test_perfect_detections_score_exactly_one():
    rng = np.random.default_rng(3)
    dets, gts = [], []
    for _ in range(4):
        gt = [
            _box(rng.uniform(0, 20), rng.uniform(0, 20), 1 + i % 3)
            for i in range(6)
        ]
        gts.append(gt)
        dets.append(_dets([_box(b.cx, b.cy, b.class_id, score=0.9) for b in gt]))
    result = evaluate(dets, gts, 3)
    assert result.mean_ap == 1.0
    np.testing.assert_array_equal(result.ap, np.ones_like(result.ap))
    assert result.fp.sum() == 0 and result.fn.sum() == 0


def test_duplicate_detection_is_a_false_positive():
    gt = [_box(0.0, 0.0, 1)]
    dets = _dets([_box(0.0, 0.0, 1, score=0.9), _box(0.1, 0.0, 1, score=0.8)])
    result = evaluate([dets], [gt], 1)
    assert result.tp[0] == 1 and result.fp[0] == 1 and result.fn[0] == 0
    # recall reaches 1 early, so only the precision drop is felt
    assert 0.0 < result.ap[0, 0] < 1.0


def test_threshold_is_strict():
    gt = [_box(0.0, 0.0, 1)]
    at_three = _dets([_box(3.0, 0.0, 1, score=0.9)])
    assert match_and_ap(at_three, gt, 1, 2.0) == 0.0
    assert match_and_ap(at_three, gt, 1, 4.0) == 1.0
    # d == dist does not match
    at_two = _dets([_box(2.0, 0.0, 1, score=0.9)])
    assert match_and_ap(at_two, gt, 1, 2.0) == 0.0


def test_greedy_matching_takes_closest_free_box():
    gt = [_box(0.0, 0.0, 1), _box(1.0, 0.0, 1)]
    dets = _dets(
        [
            _box(0.4, 0.0, 1, score=0.9),  # closest to gt0, matches it
            _box(0.1, 0.0, 1, score=0.8),  # gt0 taken, gt1 is 0.9 away
        ]
    )
    result = evaluate([dets], [gt], 1)
    assert result.tp[1] == 2  # 0.4 and 0.9 both under 1.0
    assert result.tp[0] == 1  # second detection is 0.9 from the free box


def test_scene_order_invariance_under_ties():
    rng = np.random.default_rng(11)
    dets, gts = _random_scenes(rng, 3)
    fwd = evaluate(dets, gts, 3)
    rev = evaluate(dets[::-1], gts[::-1], 3)
    np.testing.assert_array_equal(fwd.ap, rev.ap)
    assert fwd.mean_ap == rev.mean_ap


def test_detection_cannot_match_other_scene():
    gt_a = [_box(0.0, 0.0, 1)]
    det_b = _dets([_box(0.0, 0.0, 1, score=0.9)])
    result = evaluate([_dets([]), det_b], [gt_a, []], 1)
    assert result.tp.sum() == 0
    assert result.fp[0] == 1 and result.fn[0] == 1


def test_no_ground_truth_class_is_flagged():
    gts = [[_box(0.0, 0.0, 1)]]
    dets = [_dets([_box(0.0, 0.0, 1, score=0.9), _box(5.0, 5.0, 2, score=0.8)])]
    result = evaluate(dets, gts, 3)
    assert result.no_gt_classes == (2, 3)
    np.testing.assert_array_equal(result.ap[1], 0.0)
    np.testing.assert_array_equal(result.ap[2], 0.0)


def test_empty_detections_give_zero_ap():
    gts = [[_box(0.0, 0.0, 1)]]
    result = evaluate([_dets([])], gts, 1)
    np.testing.assert_array_equal(result.ap, 0.0)
    assert result.fn[0] == 1


def test_scene_count_mismatch_raises():
    with pytest.raises(ValueError, match="scene count"):
        evaluate([_dets([])], [[], []], 1)


def test_nonpositive_threshold_raises():
    with pytest.raises(ValueError, match="threshold"):
        match_and_ap(_dets([]), [], 1, 0.0)
