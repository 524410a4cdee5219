"""
Axis-aligned boxes in continuous xyxy pixel coordinates (origin top-left).

Scalar helpers (box_iou, generalized_iou, enclosing_box) work on BoundingBox
records; the pairwise_* helpers work on (n, 4) numpy arrays and are used by
the evaluator.
"""

from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with x1 <= x2 and y1 <= y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(
                f"Invalid box ({self.x1}, {self.y1}, {self.x2}, {self.y2}): "
                "expected x1 <= x2 and y1 <= y2"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def to_xywh(self) -> List[float]:
        """COCO-style [x, y, width, height]."""
        return [self.x1, self.y1, self.width, self.height]

    @classmethod
    def from_xywh(cls, values: Sequence[float]) -> "BoundingBox":
        x, y, w, h = (float(v) for v in values)
        return cls(x, y, x + w, y + h)

    def clamp(self, width: float, height: float) -> "BoundingBox":
        """Clip the box to the image rectangle [0, width] x [0, height]."""
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return BoundingBox(x1, y1, x2, y2)

    def contains(self, other: "BoundingBox", tol: float = 0.0) -> bool:
        return (
            self.x1 <= other.x1 + tol
            and self.y1 <= other.y1 + tol
            and self.x2 >= other.x2 - tol
            and self.y2 >= other.y2 - tol
        )


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 when the union is empty."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def enclosing_box(boxes: Iterable[BoundingBox]) -> BoundingBox:
    """Smallest box containing every input box.

    Raises:
        ValueError: if no boxes are given
    """
    boxes = list(boxes)
    if not boxes:
        raise ValueError("enclosing_box needs at least one box")
    return BoundingBox(
        min(b.x1 for b in boxes),
        min(b.y1 for b in boxes),
        max(b.x2 for b in boxes),
        max(b.y2 for b in boxes),
    )


def generalized_iou(a: BoundingBox, b: BoundingBox) -> float:
    """IoU minus the fraction of the enclosing box not covered by the union."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    iou = inter / union if union > 0 else 0.0
    hull = enclosing_box([a, b]).area
    if hull <= 0:
        return iou
    return iou - (hull - union) / hull


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.to_list() for b in boxes], dtype=np.float64)


def pairwise_box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (n, 4) and (m, 4) xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou
