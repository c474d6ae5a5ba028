"""Proposal labeling at several IoU thresholds and per-head minibatch plans."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence

import numpy as np

from . import geometry

log = logging.getLogger(__name__)


@dataclass
class TargetLabels:
    """Labels of a set of proposals (arrays over proposals).

    Attributes:
        best_iou: (R,) max IoU (0-100) with any ground truth, 0 if none.
        best_gt: (R,) index of that ground truth, -1 if none.
        labels: (R, n) class per threshold, 0 = background.
        t_star: (R, 4) regression targets; rows are NaN where
            ``best_iou`` is below the lowest threshold.
        thresholds: the IoU thresholds of the label columns.
    """

    best_iou: np.ndarray
    best_gt: np.ndarray
    labels: np.ndarray
    t_star: np.ndarray
    thresholds: tuple

    def __len__(self) -> int:
        return len(self.best_iou)

    def column(self, u: int) -> np.ndarray:
        return self.labels[:, self.thresholds.index(u)]

    def has_target(self) -> np.ndarray:
        return ~np.isnan(self.t_star[:, 0])


def match_proposals(proposals, gt_boxes, gt_classes, thresholds: Sequence[int]) -> TargetLabels:
    """Match each proposal to its highest-IoU ground truth.

    ``labels[:, j]`` is the matched class where ``best_iou >= thresholds[j]``
    and 0 elsewhere. Ties go to the lowest ground-truth index.
    """
    thresholds = tuple(int(u) for u in thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cls = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    r = len(props)
    t_star = np.full((r, 4), np.nan)
    if len(gts) == 0 or r == 0:
        return TargetLabels(np.zeros(r), np.full(r, -1, np.int64),
                            np.zeros((r, len(thresholds)), np.int64), t_star, thresholds)
    ious = geometry.iou_matrix(props, gts)
    best_gt = ious.argmax(axis=1)          # first max = lowest gt index
    best_iou = ious[np.arange(r), best_gt]
    best_gt = np.where(best_iou > 0, best_gt, -1)
    u = np.asarray(thresholds, dtype=np.float64)
    pos = best_iou[:, None] >= u[None, :]
    labels = np.where(pos, cls[np.maximum(best_gt, 0)][:, None], 0)
    has = best_iou >= u[0]
    if has.any():
        t_star[has] = geometry.encode_array(props[has], gts[best_gt[has]])
    return TargetLabels(best_iou, best_gt, labels.astype(np.int64), t_star, thresholds)


@dataclass
class MinibatchPlan:
    threshold: int
    indices: np.ndarray
    n_pos: int
    n_neg: int
    warning: Optional[str] = None


def sample_for_head(labels: TargetLabels, u: int, batch_size: int, pos_fraction: float,
                    rng: np.random.Generator) -> MinibatchPlan:
    """One minibatch for the head at threshold ``u``.

    Takes ``ceil(pos_fraction * batch_size)`` positives for that head (with
    replacement when fewer exist) and fills the rest with negatives
    (``best_iou < u``). Without any positive the plan is all negatives and
    carries a warning.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if not 0.0 < pos_fraction < 1.0:
        raise ValueError("pos_fraction must be in (0, 1)")
    col = labels.column(u)
    pos = np.flatnonzero(col > 0)
    neg = np.flatnonzero(col == 0)
    want = int(np.ceil(pos_fraction * batch_size))
    warning = None
    if len(pos) == 0:
        warning = f"no positives for head u={u}"
        want = 0
        pos_idx = np.zeros(0, np.int64)
    else:
        pos_idx = rng.choice(pos, size=want, replace=len(pos) < want)
    n_neg = batch_size - want
    if len(neg) == 0:
        # everything is positive: fill with more positives
        neg_idx = rng.choice(pos, size=n_neg, replace=len(pos) < n_neg) if n_neg else np.zeros(0, np.int64)
        return MinibatchPlan(u, np.concatenate([pos_idx, neg_idx]), batch_size, 0, "no negatives")
    neg_idx = rng.choice(neg, size=n_neg, replace=len(neg) < n_neg)
    return MinibatchPlan(u, np.concatenate([pos_idx, neg_idx]).astype(np.int64), want, n_neg, warning)


def plan_minibatches(labels: TargetLabels, thresholds: Sequence[int], batch_size: int,
                     pos_fraction: float, rng: np.random.Generator) -> Iterator[MinibatchPlan]:
    """Endless round-robin over heads, one plan per step."""
    thresholds = tuple(thresholds)
    step = 0
    while True:
        plan = sample_for_head(labels, thresholds[step % len(thresholds)], batch_size,
                               pos_fraction, rng)
        if plan.warning:
            log.warning(plan.warning)
        yield plan
        step += 1
