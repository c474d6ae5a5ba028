"""COCO-style detection metrics.

Matching follows the public COCO protocol: per image and class, detections
are visited by descending score and each takes the still unmatched ground
truth of highest IoU, provided that IoU reaches the threshold. Precision is
made monotone from the right and sampled at 101 recall points. Size brackets
ignore ground truth outside the bracket, and unmatched detections whose own
area is outside it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import geometry

IOU_THRESHOLDS = tuple(range(50, 100, 5))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, math.inf),
}


def in_area_range(area: np.ndarray, name: str) -> np.ndarray:
    """Area bracket membership: small is ``< 32^2``, large ``> 96^2``."""
    lo, hi = AREA_RANGES[name]
    area = np.asarray(area, dtype=np.float64)
    if name == "all":
        return np.ones(area.shape, dtype=bool)
    if name == "small":
        return area < hi
    if name == "large":
        return area > lo
    return (area >= lo) & (area <= hi)


@dataclass
class ImageDetections:
    boxes: np.ndarray     # (D, 4)
    scores: np.ndarray    # (D,)
    classes: np.ndarray   # (D,)


@dataclass
class ImageTruth:
    boxes: np.ndarray
    classes: np.ndarray


def as_detections(dets) -> ImageDetections:
    """Accept a list of ``Detection``-like objects or an ``ImageDetections``."""
    if isinstance(dets, ImageDetections):
        return dets
    dets = list(dets)
    if not dets:
        return ImageDetections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, np.int64))
    return ImageDetections(np.array([list(d.box) for d in dets], dtype=np.float64),
                           np.array([d.score for d in dets], dtype=np.float64),
                           np.array([d.category for d in dets], dtype=np.int64))


def as_truth(gt) -> ImageTruth:
    if isinstance(gt, ImageTruth):
        return gt
    boxes, classes = gt
    return ImageTruth(np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                      np.asarray(classes, dtype=np.int64).reshape(-1))


def truth_from_dataset(dataset) -> Dict[int, ImageTruth]:
    return {i: ImageTruth(dataset.gt_boxes(i), dataset.gt_classes(i)) for i in dataset.image_ids}


@dataclass
class EvalResult:
    """Metric bundle; all values are percents, NaN where undefined."""

    AP: float
    AP50: float
    AP75: float
    AP_small: float
    AP_medium: float
    AP_large: float
    AR1: float
    AR10: float
    AR100: float
    per_class: Dict[int, float] = field(default_factory=dict)
    per_threshold: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        d["per_threshold"] = {str(k): v for k, v in self.per_threshold.items()}
        return d

    def save_json(self, path) -> None:
        # NaN is emitted as null to keep the file valid JSON
        def clean(v):
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return None if isinstance(v, float) and math.isnan(v) else v
        with open(path, "w") as fh:
            json.dump(clean(self.to_dict()), fh, indent=2)

    def save_threshold_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iou_threshold", "ap"])
            for u, ap in sorted(self.per_threshold.items()):
                w.writerow([u, f"{ap:.6f}"])


# ----------------------------------------------------------------------
# matching

def _match_image(det_boxes, det_scores, gt_boxes, gt_ignore, det_ignore_area, thresholds):
    """Match one image/class at every threshold.

    Returns ``(dt_match, dt_ignore)`` with shape (T, D): whether each detection
    is a true positive and whether it is ignored. Detections must already be
    sorted by descending score.
    """
    t, d, g = len(thresholds), len(det_boxes), len(gt_boxes)
    dt_match = np.zeros((t, d), dtype=bool)
    dt_ignore = np.zeros((t, d), dtype=bool)
    if d == 0:
        return dt_match, dt_ignore
    if g:
        # non-ignored ground truth first so it wins ties against ignored ones
        gorder = np.argsort(gt_ignore, kind="mergesort")
        gb = gt_boxes[gorder]
        gi = gt_ignore[gorder]
        ious = geometry.iou_matrix(det_boxes, gb)
        for ti, thr in enumerate(thresholds):
            taken = np.zeros(g, dtype=bool)
            for di in range(d):
                best = -1
                best_iou = min(float(thr), 100.0 - 1e-8)
                for gi_ in range(g):
                    if taken[gi_]:
                        continue
                    # stop once a real match exists and only ignored gts remain
                    if best > -1 and not gi[best] and gi[gi_]:
                        break
                    if ious[di, gi_] < best_iou:
                        continue
                    best_iou = ious[di, gi_]
                    best = gi_
                if best > -1:
                    taken[best] = True
                    dt_match[ti, di] = True
                    dt_ignore[ti, di] = gi[best]
    unmatched_out = ~dt_match & det_ignore_area[None, :]
    dt_ignore |= unmatched_out
    return dt_match, dt_ignore


def _precision_recall(scores, matched, ignored, n_gt):
    """101-point interpolated AP and final recall (fractions)."""
    keep = ~ignored
    order = np.argsort(-scores[keep], kind="mergesort")
    tp = matched[keep][order].astype(np.float64)
    fp = 1.0 - tp
    if n_gt == 0:
        return None, None
    if len(tp) == 0:
        return 0.0, 0.0
    tpc = np.cumsum(tp)
    fpc = np.cumsum(fp)
    rc = tpc / n_gt
    pr = tpc / np.maximum(tpc + fpc, np.finfo(np.float64).eps)
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    # the small slack keeps k/n recalls from missing the grid point k/n
    idx = np.searchsorted(rc, RECALL_POINTS - 1e-12, side="left")
    q = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
    return float(q.mean()), float(rc[-1])


class _Accumulator:
    """Per (class, area, max_dets, threshold) collections of scored matches."""

    def __init__(self, dets: Mapping[int, ImageDetections], truth: Mapping[int, ImageTruth],
                 thresholds: Sequence[float]):
        unknown = set(dets) - set(truth)
        if unknown:
            raise ValueError(f"detections reference unknown images: {sorted(unknown)[:5]}")
        self.dets = dets
        self.truth = truth
        self.thresholds = tuple(thresholds)
        self.classes = sorted({int(c) for t in truth.values() for c in t.classes})
        self._cache: Dict[tuple, tuple] = {}

    def run(self, cls: int, area: str, max_dets: int):
        """Return (ap[T], recall[T]) fractions or None where no gt exists."""
        key = (cls, area, max_dets)
        if key in self._cache:
            return self._cache[key]
        t = len(self.thresholds)
        scores, matched, ignored = [], [], []
        n_gt = 0
        for image_id in sorted(self.truth):
            tr = self.truth[image_id]
            gmask = tr.classes == cls
            gboxes = tr.boxes[gmask]
            gign = ~in_area_range(geometry.box_areas(gboxes), area)
            n_gt += int((~gign).sum())
            dt = self.dets.get(image_id)
            if dt is None or len(dt.scores) == 0:
                continue
            dmask = dt.classes == cls
            dboxes, dscores = dt.boxes[dmask], dt.scores[dmask]
            order = np.argsort(-dscores, kind="mergesort")[:max_dets]
            dboxes, dscores = dboxes[order], dscores[order]
            dign_area = ~in_area_range(geometry.box_areas(dboxes), area)
            m, ig = _match_image(dboxes, dscores, gboxes, gign, dign_area, self.thresholds)
            scores.append(dscores)
            matched.append(m)
            ignored.append(ig)
        if n_gt == 0:
            out = (None, None)
        else:
            s = np.concatenate(scores) if scores else np.zeros(0)
            m = np.concatenate(matched, axis=1) if matched else np.zeros((t, 0), bool)
            ig = np.concatenate(ignored, axis=1) if ignored else np.zeros((t, 0), bool)
            ap = np.zeros(t)
            rc = np.zeros(t)
            for ti in range(t):
                ap[ti], rc[ti] = _precision_recall(s, m[ti], ig[ti], n_gt)
            out = (ap, rc)
        self._cache[key] = out
        return out


def _normalize_inputs(detections, ground_truth):
    dets = {int(k): as_detections(v) for k, v in detections.items()}
    truth = {int(k): as_truth(v) for k, v in ground_truth.items()}
    return dets, truth


def _mean(values: Iterable[Optional[np.ndarray]], index=None) -> float:
    vals = [v if index is None else v[index] for v in values if v is not None]
    if not vals:
        return math.nan
    return 100.0 * float(np.mean(vals))


def evaluate(detections: Mapping, ground_truth: Mapping,
             iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
             max_dets: Tuple[int, int, int] = (1, 10, 100)) -> EvalResult:
    """Compute AP/AR metrics.

    Args:
        detections: image id -> list of detections (objects with ``box``,
            ``score``, ``category``) or ``ImageDetections``.
        ground_truth: image id -> ``(boxes, classes)`` or ``ImageTruth``.
            Every image of the evaluation set must be present, including
            images without objects.
        iou_thresholds: thresholds on the 0-100 scale.
        max_dets: per image and class detection caps for AR; the largest is
            also the cap for AP.

    Raises:
        ValueError: if a detection refers to an image not in ``ground_truth``.
    """
    dets, truth = _normalize_inputs(detections, ground_truth)
    acc = _Accumulator(dets, truth, iou_thresholds)
    thr = list(acc.thresholds)
    top = max(max_dets)

    def per_class(area, k):
        return [acc.run(c, area, k)[0] for c in acc.classes]

    aps_all = per_class("all", top)
    ap_by_t = {int(u) if float(u).is_integer() else u: _mean(aps_all, i) for i, u in enumerate(thr)}
    valid = [a for a in aps_all if a is not None]
    overall = 100.0 * float(np.mean(np.stack(valid))) if valid else math.nan

    def at(u):
        return ap_by_t.get(u, math.nan)

    def area_ap(area):
        vals = [a for a in per_class(area, top) if a is not None]
        return 100.0 * float(np.mean(np.stack(vals))) if vals else math.nan

    def ar(k):
        vals = [acc.run(c, "all", k)[1] for c in acc.classes]
        vals = [v for v in vals if v is not None]
        return 100.0 * float(np.mean(np.stack(vals))) if vals else math.nan

    per_cls = {c: (100.0 * float(np.mean(a)) if a is not None else math.nan)
               for c, a in zip(acc.classes, aps_all)}
    k1, k10, k100 = sorted(max_dets)
    return EvalResult(AP=overall, AP50=at(50), AP75=at(75), AP_small=area_ap("small"),
                      AP_medium=area_ap("medium"), AP_large=area_ap("large"),
                      AR1=ar(k1), AR10=ar(k10), AR100=ar(k100),
                      per_class=per_cls, per_threshold=ap_by_t)


def ap_curve(detections: Mapping, ground_truth: Mapping,
             thresholds: Sequence[float] = IOU_THRESHOLDS) -> Dict[float, float]:
    """AP (class mean, percent) at each threshold."""
    dets, truth = _normalize_inputs(detections, ground_truth)
    acc = _Accumulator(dets, truth, thresholds)
    aps = [acc.run(c, "all", 100)[0] for c in acc.classes]
    out = {}
    for i, u in enumerate(acc.thresholds):
        v = _mean(aps, i)
        out[int(u) if float(u).is_integer() else u] = 0.0 if math.isnan(v) else v
    return out
