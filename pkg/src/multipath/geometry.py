"""Axis-aligned box arithmetic.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates with
``x2 > x1`` and ``y2 > y1``. IoU is reported on a 0-100 scale.

Scalar helpers take :class:`Box`; the ``*_array`` variants work on ``(N, 4)``
float arrays and are what the pipeline uses internally.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class DegenerateBoxError(ValueError):
    """A box has (or would have) zero or negative extent."""


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def is_valid(self) -> bool:
        return bool(self.x2 > self.x1 and self.y2 > self.y1 and all(map(math.isfinite, self)))


class RegressionTarget(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


def validate(b: Box) -> Box:
    if not Box(*b).is_valid():
        raise DegenerateBoxError(f"invalid box {tuple(b)}")
    return Box(*b)


# ----------------------------------------------------------------------
# IoU

def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 100]."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    # round-off can push identical boxes a hair above 100
    return min(100.0, 100.0 * inter / union)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU (0-100) between ``(N, 4)`` and ``(M, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, 100.0 * inter / union, 0.0)
    return np.minimum(out, 100.0)


def box_areas(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


# ----------------------------------------------------------------------
# foveal regions

def foveal_expand(b: Box, factor: float) -> Box:
    """Scale a box about its center by ``factor`` (>= 1). Not clipped."""
    if factor < 1:
        raise ValueError(f"foveal factor must be >= 1, got {factor}")
    return Box(*foveal_expand_array(np.asarray(b, dtype=np.float64)[None], factor)[0])


def foveal_expand_array(boxes: np.ndarray, factor: float) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"foveal factor must be >= 1, got {factor}")
    boxes = np.asarray(boxes, dtype=np.float64)
    if factor == 1:
        return boxes.copy()
    cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
    cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
    hw = 0.5 * factor * (boxes[:, 2] - boxes[:, 0])
    hh = 0.5 * factor * (boxes[:, 3] - boxes[:, 1])
    return np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1)


# ----------------------------------------------------------------------
# regression deltas

def encode_bbox(proposal: Box, gt: Box) -> RegressionTarget:
    return RegressionTarget(*encode_array(np.asarray([proposal]), np.asarray([gt]))[0])


def decode_bbox(proposal: Box, t) -> Box:
    return Box(*decode_array(np.asarray([proposal]), np.asarray([t]))[0])


def encode_array(proposals, gts) -> np.ndarray:
    """Center/size deltas mapping each proposal onto its ground truth."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    px, py = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
    gx, gy = g[:, 0] + 0.5 * gw, g[:, 1] + 0.5 * gh
    return np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=1)


def decode_array(proposals, deltas) -> np.ndarray:
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    px, py = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
    cx, cy = px + t[:, 0] * pw, py + t[:, 1] * ph
    w, h = pw * np.exp(t[:, 2]), ph * np.exp(t[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


# ----------------------------------------------------------------------
# flipping and clipping

def hflip_box(b: Box, image_width: float) -> Box:
    return Box(image_width - b[2], b[1], image_width - b[0], b[3])


def hflip_array(boxes, image_width: float) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([image_width - b[:, 2], b[:, 1], image_width - b[:, 0], b[:, 3]], axis=1)


def clip_box(b: Box, width: float, height: float) -> Box:
    """Clamp to ``[0, width] x [0, height]``.

    Raises:
        DegenerateBoxError: if the box does not overlap the image.
    """
    out, ok = clip_array(np.asarray([b], dtype=np.float64), width, height)
    if not ok[0]:
        raise DegenerateBoxError(f"box {tuple(b)} lies outside the {width}x{height} image")
    return Box(*out[0])


def clip_array(boxes, width: float, height: float):
    """Clip boxes; returns ``(clipped, valid)`` where ``valid`` flags non-empty results."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(b)
    out[:, 0] = np.clip(b[:, 0], 0, width)
    out[:, 2] = np.clip(b[:, 2], 0, width)
    out[:, 1] = np.clip(b[:, 1], 0, height)
    out[:, 3] = np.clip(b[:, 3], 0, height)
    valid = (out[:, 2] > out[:, 0]) & (out[:, 3] > out[:, 1])
    return out, valid
