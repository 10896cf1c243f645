"""Axis-aligned bounding-box arithmetic.

Boxes are stored in corner form ``(x_min, y_min, x_max, y_max)`` with real
coordinates. Conversion to COCO's ``(x, y, w, h)`` only happens at the
format boundary (see :mod:`odpkit.annotations`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable


class DegenerateBoxError(ValueError):
    """Raised when an overlap ratio is requested for two zero-area boxes."""


@dataclass(frozen=True, order=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"negative box extent: {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def contains(self, other: "BoundingBox") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def _union_area(a: BoundingBox, b: BoundingBox, inter: float) -> float:
    union = a.area + b.area - inter
    if union <= 0:
        raise DegenerateBoxError(f"both boxes have zero area: {a}, {b}")
    return union


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes.

    Raises:
        DegenerateBoxError: if both boxes have zero area.
    """
    inter = intersection_area(a, b)
    return inter / _union_area(a, b, inter)


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU: ``iou - (C - U) / C`` with ``C`` the enclosing-box area.

    The result lies in ``(-1, 1]``; it equals the plain IoU when one box
    contains the other.
    """
    inter = intersection_area(a, b)
    union = _union_area(a, b, inter)
    hull = union_box((a, b)).area
    return inter / union - (hull - union) / hull


def union_box(boxes: Iterable[BoundingBox]) -> BoundingBox:
    """Smallest box containing every input box."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("union_box needs at least one box")
    return BoundingBox(
        min(b.x_min for b in boxes),
        min(b.y_min for b in boxes),
        max(b.x_max for b in boxes),
        max(b.y_max for b in boxes),
    )


def clip(box: BoundingBox, bounds: BoundingBox) -> BoundingBox:
    x0 = min(max(box.x_min, bounds.x_min), bounds.x_max)
    y0 = min(max(box.y_min, bounds.y_min), bounds.y_max)
    x1 = min(max(box.x_max, bounds.x_min), bounds.x_max)
    y1 = min(max(box.y_max, bounds.y_min), bounds.y_max)
    return BoundingBox(x0, y0, x1, y1)


def expand(box: BoundingBox, factor: float, bounds: BoundingBox | None = None) -> BoundingBox:
    """Scale ``box`` about its center by ``factor`` and clip it to ``bounds``.

    Args:
        box: Box to enlarge.
        factor: Scale applied to width and height, must be >= 1.
        bounds: Clipping region, usually the image rectangle. ``None`` skips
            clipping.
    """
    if not factor >= 1:
        raise ValueError(f"expansion factor must be >= 1, got {factor}")
    cx, cy = box.center
    half_w = box.width * factor / 2
    half_h = box.height * factor / 2
    # min/max guard against rounding shrinking the box below the original
    grown = BoundingBox(
        min(cx - half_w, box.x_min), min(cy - half_h, box.y_min), max(cx + half_w, box.x_max), max(cy + half_h, box.y_max)
    )
    return grown if bounds is None else clip(grown, bounds)


def split_grid(box: BoundingBox, rows: int, cols: int) -> list[list[BoundingBox]]:
    """Split ``box`` into ``rows x cols`` equal cells, indexed ``[row][col]``."""
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be >= 1")
    xs = [box.x_min + box.width * i / cols for i in range(cols)] + [box.x_max]
    ys = [box.y_min + box.height * j / rows for j in range(rows)] + [box.y_max]
    return [[BoundingBox(xs[c], ys[r], xs[c + 1], ys[r + 1]) for c in range(cols)] for r in range(rows)]

