"""Axis-aligned boxes ``(x1, y1, x2, y2)`` in pixel units, x2/y2 exclusive."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class BoxAnnotation:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int
    score: float

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def _xyxy(b):
    return b.coords if hasattr(b, "coords") else tuple(b)


def iou(a, b) -> float:
    """Intersection over union; a degenerate box (zero or negative extent) scores 0."""
    ax1, ay1, ax2, ay2 = _xyxy(a)
    bx1, by1, bx2, by2 = _xyxy(b)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def nms(boxes, scores, iou_thresh: float) -> list[int]:
    """Greedy NMS. Visits boxes by descending score, ties by lower index; a box is
    dropped when its IoU with a kept box is >= ``iou_thresh``. Returns kept indices."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) < iou_thresh for j in keep):
            keep.append(i)
    return keep


def encode_deltas(proposal, target) -> tuple[float, float, float, float]:
    """Centre offsets relative to proposal size and log size ratios."""
    px1, py1, px2, py2 = _xyxy(proposal)
    tx1, ty1, tx2, ty2 = _xyxy(target)
    pw, ph = px2 - px1, py2 - py1
    tw, th = tx2 - tx1, ty2 - ty1
    return (((tx1 + tx2) - (px1 + px2)) / (2 * pw),
            ((ty1 + ty2) - (py1 + py2)) / (2 * ph),
            math.log(tw / pw),
            math.log(th / ph))


def decode_deltas(proposal, deltas, clip: float = math.log(1000.0 / 16)) -> tuple[float, float, float, float]:
    px1, py1, px2, py2 = _xyxy(proposal)
    pw, ph = px2 - px1, py2 - py1
    cx = (px1 + px2) / 2 + deltas[0] * pw
    cy = (py1 + py2) / 2 + deltas[1] * ph
    w = pw * math.exp(min(deltas[2], clip))
    h = ph * math.exp(min(deltas[3], clip))
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def clip_box(box, width: int, height: int) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = _xyxy(box)
    return (min(max(x1, 0.0), width), min(max(y1, 0.0), height),
            min(max(x2, 0.0), width), min(max(y2, 0.0), height))
