"""Axis-aligned box algebra in pixel coordinates.

Boxes are stored as ``(x, y, w, h)`` with a top-left origin. All functions are
pure and operate on immutable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"box field {name} is not finite: {value!r}")
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box has negative size: w={self.w}, h={self.h}")

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(x1, y1, max(x2 - x1, 0.0), max(y2 - y1, 0.0))

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Box":
        if len(values) != 4:
            raise ValueError(f"expected 4 box values, got {len(values)}")
        return cls(*(float(v) for v in values))

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x2, self.y2)

    def to_list(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.w), float(self.h)]

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x + dx, self.y + dy, self.w, self.h)

    def clamp(self, width: float, height: float) -> "Box":
        """Clip the box to the ``[0, width] x [0, height]`` canvas."""
        x1 = min(max(self.x, 0.0), width)
        y1 = min(max(self.y, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return Box.from_xyxy(x1, y1, x2, y2)


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0, 1]: {self.confidence}")


def area(b: Box) -> float:
    return b.w * b.h


def intersection(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    inter = intersection(a, b)
    union = area(a) + area(b) - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def confidence_order(confidences: Iterable[float]) -> list[int]:
    """Indices sorted by descending confidence, ties by lower index."""
    conf = list(confidences)
    return sorted(range(len(conf)), key=lambda i: (-conf[i], i))


def nms(candidates: Sequence[ScoredBox], iou_threshold: float = 0.7) -> list[int]:
    """Greedy non-maximum suppression.

    A candidate is suppressed when its IoU with an already kept box is strictly
    greater than ``iou_threshold``. Returns kept indices in descending
    confidence order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    keep: list[int] = []
    for i in confidence_order(c.confidence for c in candidates):
        box = candidates[i].box
        if all(iou(box, candidates[j].box) <= iou_threshold for j in keep):
            keep.append(i)
    return keep


def assign_labels(proposals: Sequence[Box], gt: Box, threshold: float = 0.5) -> list[bool]:
    """Label each proposal positive (True) iff its IoU with ``gt`` is >= threshold."""
    if threshold < 0:
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    return [iou(p, gt) >= threshold for p in proposals]
