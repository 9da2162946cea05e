"""Boxes, anchor grids, anchor assignment and box encoding.

Boxes are ``(x_min, y_min, x_max, y_max)`` in continuous pixel
coordinates. Scalar helpers take :class:`BBox`; the ``*_array`` variants
work on ``(N, 4)`` float arrays and are what the detector uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from mcpad.errors import InvalidBoxError

# exp() guard on decoded log-size deltas
MAX_LOG_SCALE = math.log(1000.0 / 16)
# With a 16 px stride, a 24 px face half a stride off the nearest 24 px
# anchor overlaps it at IoU ~0.29, so the usual 0.5 / 0.4 split would leave
# small faces with only a forced, near-background positive.
DEFAULT_POS_IOU = 0.3
DEFAULT_NEG_IOU = 0.2

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise InvalidBoxError(f"non-positive side: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> BBox:
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class AnchorGrid:
    """Dense anchor layout: one anchor per (cell, scale, ratio).

    ``aspect_ratios`` are height / width; an anchor of side ``s`` and
    ratio ``r`` has width ``s / sqrt(r)`` and height ``s * sqrt(r)``.
    """

    stride: float = 16.0
    scales: tuple[float, ...] = (24.0, 48.0, 96.0)
    aspect_ratios: tuple[float, ...] = (1.0, 1.3)
    width: int = 128
    height: int = 128

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "aspect_ratios", tuple(float(r) for r in self.aspect_ratios))
        if self.stride <= 0:
            raise ValueError("stride must be positive")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be a non-empty list of positive sides")
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("aspect ratios must be a non-empty list of positive values")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    def for_image(self, width: int, height: int) -> AnchorGrid:
        return AnchorGrid(self.stride, tuple(self.scales), tuple(self.aspect_ratios), width, height)


@dataclass
class AnchorAssignment:
    """Per-anchor training targets.

    ``labels`` holds POSITIVE / NEGATIVE / IGNORE; ``classes`` and
    ``matched`` are the class index and ground-truth index for positives,
    ``-1`` elsewhere.
    """

    labels: np.ndarray
    classes: np.ndarray
    matched: np.ndarray
    max_iou: np.ndarray = field(repr=False)

    @property
    def positive(self) -> np.ndarray:
        return self.labels == POSITIVE

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.labels == POSITIVE))


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


@lru_cache(maxsize=32)
def _anchor_array(grid: AnchorGrid) -> np.ndarray:
    nx = math.ceil(grid.width / grid.stride)
    ny = math.ceil(grid.height / grid.stride)
    shapes = []
    for s in grid.scales:
        for r in grid.aspect_ratios:
            shapes.append((s / math.sqrt(r), s * math.sqrt(r)))
    shapes = np.asarray(shapes)
    cx = (np.arange(nx) + 0.5) * grid.stride
    cy = (np.arange(ny) + 0.5) * grid.stride
    # order: row-major cells, then scale, then ratio
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx.ravel(), cyy.ravel()], axis=1)
    c = np.repeat(centers, len(shapes), axis=0)
    wh = np.tile(shapes, (len(centers), 1))
    boxes = np.concatenate([c - wh / 2, c + wh / 2], axis=1)
    boxes.setflags(write=False)
    return boxes


def generate_anchors_array(grid: AnchorGrid) -> np.ndarray:
    """Anchors as a read-only ``(N, 4)`` array, unclipped."""
    return _anchor_array(grid)


def generate_anchors(grid: AnchorGrid) -> list[BBox]:
    return [BBox.from_array(row) for row in _anchor_array(grid)]


def assign_anchors(
    anchors,
    gt: list[tuple[BBox, int]],
    pos_thr: float = DEFAULT_POS_IOU,
    neg_thr: float = DEFAULT_NEG_IOU,
) -> AnchorAssignment:
    """Label every anchor positive, negative or ignore.

    An anchor is positive (with the class of its best ground truth) when
    its best IoU reaches ``pos_thr``, negative below ``neg_thr`` and
    ignored in between. Each ground truth also forces its best anchor
    positive, lowest anchor index on ties, so no box goes unmatched. Boxes
    are forced in order, and a later box skips anchors forced earlier.
    """
    if pos_thr < neg_thr:
        raise ValueError(f"pos_thr {pos_thr} < neg_thr {neg_thr}")
    if isinstance(anchors, list):
        anchors = np.array([a.as_array() for a in anchors]).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64)
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    classes = np.full(n, -1, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if not gt or n == 0:
        return AnchorAssignment(labels, classes, matched, np.zeros(n))

    gt_boxes = np.array([box.as_array() for box, _ in gt])
    gt_classes = np.array([cls for _, cls in gt], dtype=np.int64)
    overlaps = iou_matrix(anchors, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best_gt]

    labels[best_iou >= neg_thr] = IGNORE
    pos = best_iou >= pos_thr
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]

    claimed = np.zeros(n, dtype=bool)
    for g in range(len(gt)):
        # an anchor already forced for an earlier box is not taken over
        col = np.where(claimed, -1.0, overlaps[:, g])
        a = int(col.argmax())
        if claimed[a]:
            continue
        claimed[a] = True
        labels[a] = POSITIVE
        matched[a] = g

    classes[labels == POSITIVE] = gt_classes[matched[labels == POSITIVE]]
    return AnchorAssignment(labels, classes, matched, best_iou)


def encode_array(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = anchors[:, 0] + wa / 2
    ya = anchors[:, 1] + ha / 2
    wg = gt[:, 2] - gt[:, 0]
    hg = gt[:, 3] - gt[:, 1]
    xg = gt[:, 0] + wg / 2
    yg = gt[:, 1] + hg / 2
    return np.stack([(xg - xa) / wa, (yg - ya) / ha, np.log(wg / wa), np.log(hg / ha)], axis=1)


def decode_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_array`, without clipping."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = anchors[:, 0] + wa / 2
    ya = anchors[:, 1] + ha / 2
    x = xa + deltas[:, 0] * wa
    y = ya + deltas[:, 1] * ha
    w = wa * np.exp(np.minimum(deltas[:, 2], MAX_LOG_SCALE))
    h = ha * np.exp(np.minimum(deltas[:, 3], MAX_LOG_SCALE))
    return np.stack([x - w / 2, y - h / 2, x + w / 2, y + h / 2], axis=1)


def clip_array(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).copy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
    return boxes


def encode_box(anchor: BBox, gt: BBox) -> np.ndarray:
    """Regression target ``(dx/w_a, dy/h_a, ln(w_g/w_a), ln(h_g/h_a))``."""
    return encode_array(anchor.as_array(), gt.as_array())[0]


def decode_box(anchor: BBox, deltas, image_size: tuple[int, int] | None = None) -> BBox:
    """Apply regression deltas to an anchor and clip to ``image_size`` (width, height).

    Raises:
        InvalidBoxError: the clipped box has a non-positive side.
    """
    box = decode_array(anchor.as_array(), deltas)
    if image_size is not None:
        box = clip_array(box, *image_size)
    return BBox.from_array(box[0])
