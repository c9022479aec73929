"""Integer boxes on the feature map, IoU, k x k grids and greedy NMS.

Boxes are half-open pixel rectangles ``[x1, x2) x [y1, y2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pprfcn.errors import DimensionError, DomainError


@dataclass(frozen=True, order=True)
class Box:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DomainError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def within(self, height: int, width: int) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height

    def contains(self, x: int, y: int) -> bool:
        return self.x1 <= x < self.x2 and self.y1 <= y < self.y2


def intersection(a: Box, b: Box) -> Box | None:
    x1, y1 = max(a.x1, b.x1), max(a.y1, b.y1)
    x2, y2 = min(a.x2, b.x2), min(a.y2, b.y2)
    if x1 < x2 and y1 < y2:
        return Box(x1, y1, x2, y2)
    return None


def iou(a: Box, b: Box) -> float:
    inter = intersection(a, b)
    if inter is None:
        return 0.0
    i = inter.area
    return i / (a.area + b.area - i)


def union_box(a: Box, b: Box) -> Box:
    """Smallest box covering both ``a`` and ``b``."""
    return Box(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def grid_edges(lo: int, hi: int, k: int) -> list[int]:
    """The k+1 cell boundaries along one axis of ``[lo, hi)``.

    Cell ``c`` holds the pixels ``v`` with ``floor((v - lo) * k / (hi - lo)) == c``,
    i.e. ``[lo + ceil(c * n / k), lo + ceil((c + 1) * n / k))``. When the extent is
    below ``k`` some cells are empty.
    """
    n = hi - lo
    return [lo + (c * n + k - 1) // k for c in range(k + 1)]


def grid_assign(box: Box, k: int, x: int, y: int):
    """Grid cell ``(row, col)`` of pixel ``(x, y)`` inside ``box``, or ``None`` if outside."""
    if k < 1:
        raise DomainError("k must be >= 1")
    if not box.contains(x, y):
        return None
    col = min(k - 1, (x - box.x1) * k // box.width)
    row = min(k - 1, (y - box.y1) * k // box.height)
    return row, col


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    """``N x 4`` int64 array of (x1, y1, x2, y2)."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.int64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``N x 4`` / ``M x 4`` coordinate arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def score_order(scores) -> list[int]:
    """Indices by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    return [int(i) for i in np.lexsort((np.arange(len(scores)), -scores))]


def nms(boxes: Sequence[Box], scores, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    A box is suppressed when its IoU with an already kept box exceeds
    ``iou_threshold``. Kept indices come back in descending score order.
    """
    if len(boxes) != len(scores):
        raise DimensionError(f"{len(boxes)} boxes but {len(scores)} scores")
    if not 0 < iou_threshold < 1:
        raise DomainError("iou_threshold must lie in (0, 1)")
    if len(boxes) == 0:
        return []
    overlaps = iou_matrix(boxes_to_array(boxes), boxes_to_array(boxes))
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in score_order(scores):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlaps[i] > iou_threshold
    return keep
