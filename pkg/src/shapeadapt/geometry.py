"""Axis-aligned boxes, aspect ratios and IoU.

Boxes are stored as ``(x, y, w, h)`` with real coordinates; corner format is
only used at I/O boundaries (see :meth:`BoundingBox.from_corners`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ValidationError


def _check_box(x: float, y: float, w: float, h: float) -> None:
    if not all(math.isfinite(v) for v in (x, y, w, h)):
        raise ValidationError(f"box has non-finite field: {(x, y, w, h)}")
    if w <= 0 or h <= 0:
        raise ValidationError(f"degenerate box: w={w}, h={h}")


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        _check_box(self.x, self.y, self.w, self.h)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls(x1, y1, x2 - x1, y2 - y1)

    def to_corners(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    def transpose(self) -> "BoundingBox":
        """Same corner, width and height swapped."""
        return BoundingBox(self.x, self.y, self.h, self.w)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class RegionProposal:
    box: BoundingBox
    score_l: float

    def __post_init__(self):
        if not (0.0 <= self.score_l <= 1.0):
            raise ValidationError(f"score_l must lie in [0, 1], got {self.score_l}")
        object.__setattr__(self, "score_l", float(self.score_l))


def aspect_ratio(box: BoundingBox) -> float:
    """Height over width."""
    _check_box(box.x, box.y, box.w, box.h)
    return box.h / box.w


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; boxes touching only along an edge give 0."""
    ax1, ay1, ax2, ay2 = a.to_corners()
    bx1, by1, bx2, by2 = b.to_corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner arithmetic as the intersection, so iou(a, a) == 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return min(1.0, inter / union)
