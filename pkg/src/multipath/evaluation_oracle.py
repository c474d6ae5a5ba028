"""Brute-force reference evaluator for small instances.

Written independently of :mod:`multipath.evaluation` and kept deliberately
naive: plain Python lists, IoU by explicit arithmetic, and interpolated
precision obtained by scanning every cutoff of the ranked list for each
recall level. It refuses inputs larger than 20 detections or 10 ground-truth
boxes per image.
"""

from __future__ import annotations

import math

from .evaluation import EvalResult

MAX_DETS_PER_IMAGE = 20
MAX_GTS_PER_IMAGE = 10


class InstanceTooLarge(ValueError):
    pass


def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return 100.0 * inter / union


def _area(b):
    return (b[2] - b[0]) * (b[3] - b[1])


def _inside(area, bracket):
    if bracket == "all":
        return True
    if bracket == "small":
        return area < 32 * 32
    if bracket == "medium":
        return 32 * 32 <= area <= 96 * 96
    return area > 96 * 96


def _records(detections, ground_truth):
    gts = {}
    for image_id, gt in ground_truth.items():
        boxes, classes = gt if isinstance(gt, tuple) else (gt.boxes, gt.classes)
        rows = [(tuple(float(v) for v in b), int(c)) for b, c in zip(boxes, classes)]
        if len(rows) > MAX_GTS_PER_IMAGE:
            raise InstanceTooLarge(f"image {image_id}: {len(rows)} ground-truth boxes")
        gts[int(image_id)] = rows
    dets = {}
    for image_id, ds in detections.items():
        if int(image_id) not in gts:
            raise ValueError(f"detection for unknown image {image_id}")
        rows = [(tuple(float(v) for v in d.box), int(d.category), float(d.score)) for d in ds]
        if len(rows) > MAX_DETS_PER_IMAGE:
            raise InstanceTooLarge(f"image {image_id}: {len(rows)} detections")
        dets[int(image_id)] = rows
    return dets, gts


def _ranked_outcomes(dets, gts, cls, thr, bracket, cap):
    """List of (score, is_tp) over counted detections plus the number of counted gts."""
    outcomes = []
    n_gt = 0
    for image_id in sorted(gts):
        g = [(box, _inside(_area(box), bracket)) for box, c in gts[image_id] if c == cls]
        n_gt += sum(1 for _, counted in g if counted)
        d = [(box, s) for box, c, s in dets.get(image_id, []) if c == cls]
        # stable descending sort, then per-image cap
        d = sorted(d, key=lambda r: -r[1])[:cap]
        used = [False] * len(g)
        for box, score in d:
            # prefer the counted gt with the highest IoU; fall back to an ignored one
            choice = None
            for want_counted in (True, False):
                best = None
                for j, (gbox, counted) in enumerate(g):
                    if used[j] or counted != want_counted:
                        continue
                    v = _iou(box, gbox)
                    if v >= thr and (best is None or v > best[0]):
                        best = (v, j)
                if best is not None:
                    choice = best[1]
                    break
            if choice is not None:
                used[choice] = True
                if g[choice][1]:
                    outcomes.append((score, True))
            elif _inside(_area(box), bracket):
                outcomes.append((score, False))
    outcomes.sort(key=lambda r: -r[0])
    return outcomes, n_gt


def _interpolated_ap(outcomes, n_gt):
    points = []
    tp = 0
    for i, (_, hit) in enumerate(outcomes, 1):
        tp += hit
        points.append((tp / n_gt, tp / i))
    total = 0.0
    for r in range(101):
        level = r / 100
        best = 0.0
        for rec, prec in points:
            if rec >= level - 1e-12 and prec > best:
                best = prec
        total += best
    recall = points[-1][0] if points else 0.0
    return total / 101, recall


def _summary(dets, gts, classes, thresholds, bracket, cap):
    aps, recalls = [], []
    for c in classes:
        per_t_ap, per_t_rec = [], []
        for u in thresholds:
            outcomes, n_gt = _ranked_outcomes(dets, gts, c, u, bracket, cap)
            if n_gt == 0:
                break
            ap, rec = _interpolated_ap(outcomes, n_gt)
            per_t_ap.append(ap)
            per_t_rec.append(rec)
        else:
            aps.append(per_t_ap)
            recalls.append(per_t_rec)
    return aps, recalls


def _pct_mean(rows, col=None):
    vals = [v for r in rows for i, v in enumerate(r) if col is None or i == col]
    return 100.0 * sum(vals) / len(vals) if vals else math.nan


def oracle_evaluate(detections, ground_truth, iou_thresholds=tuple(range(50, 100, 5))) -> EvalResult:
    """Reference metrics computed by exhaustive enumeration."""
    dets, gts = _records(detections, ground_truth)
    classes = sorted({c for rows in gts.values() for _, c in rows})
    thresholds = list(iou_thresholds)
    aps, _ = _summary(dets, gts, classes, thresholds, "all", 100)
    per_threshold = {u: _pct_mean(aps, i) for i, u in enumerate(thresholds)}
    per_class = {c: 100.0 * sum(a) / len(a) for c, a in zip(classes, aps)}

    def bracket(name):
        return _pct_mean(_summary(dets, gts, classes, thresholds, name, 100)[0])

    def recall(cap):
        return _pct_mean(_summary(dets, gts, classes, thresholds, "all", cap)[1])

    return EvalResult(AP=_pct_mean(aps), AP50=per_threshold.get(50, math.nan),
                      AP75=per_threshold.get(75, math.nan), AP_small=bracket("small"),
                      AP_medium=bracket("medium"), AP_large=bracket("large"),
                      AR1=recall(1), AR10=recall(10), AR100=recall(100),
                      per_class=per_class, per_threshold=per_threshold)
