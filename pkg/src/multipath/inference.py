"""From network outputs to detections.

``detect`` runs each model on every enabled test-time variant (identity or
horizontal flip, one or both RoI quantization modes), averages the
head-averaged softmax outputs of all variants and models, averages the
decoded boxes of the flip variants coordinate-wise, and emits one detection
per (proposal, foreground class) before class-wise NMS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import geometry
from .autograd import no_grad
from .network import QUANTIZATION_MODES, MultiPathNet, average_heads


@dataclass
class Detection:
    box: geometry.Box
    category: int
    score: float


@dataclass
class InferenceOptions:
    nms_threshold: float = 30.0
    max_detections: int = 100
    proposals_per_image: int = 1000
    hflip: bool = False
    fmp: bool = False
    ensemble: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.nms_threshold <= 100.0:
            raise ValueError("nms_threshold must be in [0, 100]")
        if self.max_detections < 1 or self.proposals_per_image < 1:
            raise ValueError("max_detections and proposals_per_image must be >= 1")


def _order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # score descending, ties by lower x1 then lower y1
    return np.lexsort((boxes[:, 1], boxes[:, 0], -scores))


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
               threshold: float) -> np.ndarray:
    """Greedy class-wise NMS; returns kept indices in output order.

    A detection survives iff its IoU with every already kept detection of the
    same class is at most ``threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    order = _order(boxes, scores)
    keep = []
    for c in np.unique(classes):
        idx = order[classes[order] == c]
        if len(idx) == 0:
            continue
        ious = geometry.iou_matrix(boxes[idx], boxes[idx])
        alive = np.ones(len(idx), dtype=bool)
        for a in range(len(idx)):
            if not alive[a]:
                continue
            keep.append(idx[a])
            alive[a + 1:] &= ious[a, a + 1:] <= threshold
    keep = np.asarray(keep, dtype=np.int64)
    if len(keep) == 0:
        return keep
    return keep[_order(boxes[keep], scores[keep])]


def nms(dets: Sequence[Detection], threshold: float) -> List[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.category for d in dets])
    return [dets[i] for i in nms_arrays(boxes, scores, classes, threshold)]


@dataclass
class ScoredProposals:
    """Averaged class probabilities and boxes for a set of proposals."""

    probs: np.ndarray     # (R, K+1)
    boxes: np.ndarray     # (R, 4) decoded
    index: np.ndarray     # (R,) rows of the input proposal list


def score_proposals(image: np.ndarray, proposals: np.ndarray, models: Sequence[MultiPathNet],
                    hflip: bool = False, fmp: bool = False) -> ScoredProposals:
    """Average softmax outputs over models and test-time variants."""
    if not models:
        raise ValueError("need at least one model")
    k = models[0].cfg.num_classes
    if any(m.cfg.num_classes != k for m in models):
        raise ValueError("ensemble members disagree on the number of classes")
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    width = image.shape[-1]
    flips = (False, True) if hflip else (False,)
    prob_sum = None
    n_var = 0
    box_sum = None
    index = None
    for mi, model in enumerate(models):
        modes = QUANTIZATION_MODES if fmp else (model.cfg.quantization,)
        for flip in flips:
            img = image[:, :, ::-1] if flip else image
            props = geometry.hflip_array(proposals, width) if flip else proposals
            with no_grad():
                pyramid = model.trunk(np.ascontiguousarray(img, dtype=model.dtype)[None])
            for mode in modes:
                hs = model.predict(img, props, quantization=mode, pyramid=pyramid)
                if index is None:
                    index = hs.index
                p = average_heads(hs.probs)
                prob_sum = p if prob_sum is None else prob_sum + p
                n_var += 1
                if mi == 0 and mode == model.cfg.quantization:
                    b = geometry.decode_array(hs.boxes, hs.deltas)
                    if flip:
                        b = geometry.hflip_array(b, width)
                    box_sum = b if box_sum is None else box_sum + b
    return ScoredProposals(prob_sum / n_var, box_sum / len(flips), index)


def detections_from_scores(sp: ScoredProposals, nms_threshold: float, max_detections: int,
                           width: Optional[float] = None, height: Optional[float] = None):
    """Per-class detections after NMS. Returns ``(boxes, scores, classes)`` arrays."""
    r, k1 = sp.probs.shape
    if r == 0:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, np.int64)
    boxes = sp.boxes
    if width is not None and height is not None:
        boxes, ok = geometry.clip_array(boxes, width, height)
        # a decoded box that collapsed to nothing is dropped
        rows = np.flatnonzero(ok)
    else:
        rows = np.arange(r)
    classes = np.repeat(np.arange(1, k1)[None, :], len(rows), axis=0).reshape(-1)
    scores = sp.probs[rows, 1:].reshape(-1)
    bx = np.repeat(boxes[rows], k1 - 1, axis=0)
    keep = nms_arrays(bx, scores, classes, nms_threshold)[:max_detections]
    return bx[keep], scores[keep], classes[keep]


def detect(image: np.ndarray, proposals: np.ndarray, models: Sequence[MultiPathNet],
           opts: Optional[InferenceOptions] = None) -> List[Detection]:
    opts = opts or InferenceOptions()
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)[:opts.proposals_per_image]
    if len(proposals) == 0:
        raise ValueError("no proposals")
    sp = score_proposals(image, proposals, models, opts.hflip, opts.fmp)
    h, w = image.shape[-2:]
    boxes, scores, classes = detections_from_scores(sp, opts.nms_threshold, opts.max_detections, w, h)
    return [Detection(geometry.Box(*b), int(c), float(s)) for b, s, c in zip(boxes, scores, classes)]


# ----------------------------------------------------------------------
# JSON lines

def write_detections(path, detections: Dict[int, Iterable[Detection]]) -> None:
    with open(path, "w") as fh:
        for image_id in sorted(detections):
            for d in detections[image_id]:
                fh.write(json.dumps({"image_id": int(image_id), "class": int(d.category),
                                     "score": float(d.score),
                                     "box": [float(v) for v in d.box]}) + "\n")


def read_detections(path) -> Dict[int, List[Detection]]:
    out: Dict[int, List[Detection]] = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                det = Detection(geometry.Box(*map(float, rec["box"])), int(rec["class"]),
                                float(rec["score"]))
                out.setdefault(int(rec["image_id"]), []).append(det)
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: malformed detection record") from exc
    return out
