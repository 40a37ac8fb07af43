"""Detection metrics: greedy center-distance matching and interpolated AP.

Matching walks detections in descending score order; a detection is a true
positive when the closest still-unmatched ground-truth box of its class lies
strictly within the distance threshold (BEV center distance, ties on the
lowest box index).  The precision-recall curve is sampled at 101 evenly
spaced recall points (np.interp, zero beyond the last operating point), the
bins at recall <= 0.1 are dropped, precision is reduced by 0.1 and clamped
at zero, and the mean is renormalized by 0.9, so a perfect detector scores
exactly 1.0.
"""

import math
from dataclasses import dataclass

import numpy as np

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)

_N_SAMPLES = 101
_MIN_RECALL = 0.1
_MIN_PRECISION = 0.1


@dataclass(frozen=True)
class EvalResult:
    """Pooled evaluation over a scene set.

    ap[k, t] is the AP of class_id k + 1 at thresholds[t]; class_mean
    averages each row; mean_ap averages class_mean.  tp/fp/fn are pooled
    over classes per threshold.  no_gt_classes lists class ids that never
    appear in the ground truth (their AP rows are defined as 0).
    """

    thresholds: tuple
    ap: np.ndarray
    class_mean: np.ndarray
    mean_ap: float
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    no_gt_classes: tuple


def _rank_key(box):
    """Score-descending processing order with a geometric tiebreak, so the
    pooled ranking cannot depend on scene order when scores collide."""
    return (
        -box.score,
        box.class_id,
        box.cx,
        box.cy,
        box.cz,
        box.l,
        box.w,
        box.h,
        box.yaw,
    )


def _ranked(dets_by_scene, class_id):
    pooled = []
    for si, det_set in enumerate(dets_by_scene):
        for box in det_set.boxes:
            if box.class_id == class_id:
                pooled.append((_rank_key(box), si, box))
    pooled.sort(key=lambda item: item[0])
    return pooled


def _tp_flags(ranked, gts_by_scene, class_id, dist):
    """Greedy matching; returns (flags, n_pos) in pooled processing order."""
    gt_pool = [[b for b in boxes if b.class_id == class_id] for boxes in gts_by_scene]
    n_pos = sum(len(g) for g in gt_pool)
    matched = [set() for _ in gts_by_scene]
    flags = []
    for _, si, box in ranked:
        best = None
        best_d = dist
        for gi, gt in enumerate(gt_pool[si]):
            if gi in matched[si]:
                continue
            d = math.hypot(box.cx - gt.cx, box.cy - gt.cy)
            if d < best_d:
                best_d = d
                best = gi
        if best is None:
            flags.append(False)
        else:
            matched[si].add(best)
            flags.append(True)
    return flags, n_pos


def _ap_from_flags(flags, n_pos):
    if n_pos == 0 or not flags:
        return 0.0
    hits = np.asarray(flags, dtype=bool)
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    rec = tp / float(n_pos)
    prec = tp / (tp + fp)
    samples = np.linspace(0.0, 1.0, _N_SAMPLES)
    interp = np.interp(samples, rec, prec, right=0.0)
    first_kept = int(round(_MIN_RECALL * (_N_SAMPLES - 1))) + 1
    kept = np.clip(interp[first_kept:] - _MIN_PRECISION, 0.0, None)
    # renormalize per sample: 0.9 / 0.9 is exactly 1.0, so a perfect
    # detector's AP is exactly 1.0 rather than 1.0 + a few ulp
    return float((kept / (1.0 - _MIN_PRECISION)).mean())


def match_and_ap(dets, gts, class_id, dist):
    """AP of one scene's detections against its ground truth at one
    threshold; no ground truth of the class gives 0."""
    if dist <= 0:
        raise ValueError("distance threshold must be positive, got %g" % dist)
    ranked = _ranked([dets], class_id)
    flags, n_pos = _tp_flags(ranked, [gts], class_id, dist)
    return _ap_from_flags(flags, n_pos)


def evaluate(dets_per_scene, gts_per_scene, n_classes, thresholds=THRESHOLDS):
    """Pooled AP per (class, threshold) over a scene set.

    Detections and ground truth are pooled across scenes per class, but a
    detection can only match ground truth from its own scene.  Duplicate
    detections of one box become false positives.  mean_ap averages the
    per-class means of the per-threshold APs.
    """
    if len(dets_per_scene) != len(gts_per_scene):
        raise ValueError(
            "scene count mismatch: %d detection sets vs %d ground-truth sets"
            % (len(dets_per_scene), len(gts_per_scene))
        )
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1, got %d" % n_classes)
    n_t = len(thresholds)
    ap = np.zeros((n_classes, n_t), dtype=np.float64)
    tp = np.zeros(n_t, dtype=np.int64)
    fp = np.zeros(n_t, dtype=np.int64)
    fn = np.zeros(n_t, dtype=np.int64)
    no_gt = []
    for k in range(n_classes):
        class_id = k + 1
        ranked = _ranked(dets_per_scene, class_id)
        seen_gt = False
        for t, dist in enumerate(thresholds):
            flags, n_pos = _tp_flags(ranked, gts_per_scene, class_id, dist)
            seen_gt = seen_gt or n_pos > 0
            ap[k, t] = _ap_from_flags(flags, n_pos)
            n_tp = int(sum(flags))
            tp[t] += n_tp
            fp[t] += len(flags) - n_tp
            fn[t] += n_pos - n_tp
        if not seen_gt:
            no_gt.append(class_id)
    class_mean = ap.mean(axis=1)
    return EvalResult(
        thresholds=tuple(thresholds),
        ap=ap,
        class_mean=class_mean,
        mean_ap=float(class_mean.mean()),
        tp=tp,
        fp=fp,
        fn=fn,
        no_gt_classes=tuple(no_gt),
    )
