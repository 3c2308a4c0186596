"""Boxes, IoU, non-maximum suppression, and affine transforms of boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in absolute pixel coordinates; x1 < x2, y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError(f"box coordinates must be finite: {self}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"box must have positive width and height: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def area(self) -> float:
        return self.width * self.height

    def astuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def corners(self) -> np.ndarray:
        """The four corners as a (4, 2) array of (x, y) points."""
        return np.array(
            [
                [self.x1, self.y1],
                [self.x2, self.y1],
                [self.x2, self.y2],
                [self.x1, self.y2],
            ],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class Detection:
    """A scored, classified box: the output of inference."""

    box: Box
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative: {self.class_id}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1]: {self.score}")


@dataclass(frozen=True)
class AffineTransform:
    """2x3 affine map of the plane: (x, y) -> (a x + b y + c, d x + e y + f)."""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    def __post_init__(self) -> None:
        if abs(self.det) <= 1e-9:
            raise ValueError(f"affine transform is singular: {self}")

    @property
    def det(self) -> float:
        return self.a * self.e - self.b * self.d

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b, self.c], [self.d, self.e, self.f]], dtype=np.float64)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> AffineTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2])

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

    @classmethod
    def translation(cls, tx: float, ty: float) -> AffineTransform:
        return cls(1.0, 0.0, tx, 0.0, 1.0, ty)

    @classmethod
    def rotation(cls, degrees: float, cx: float = 0.0, cy: float = 0.0) -> AffineTransform:
        """Rotation by ``degrees`` about (cx, cy)."""
        t = math.radians(degrees)
        cos, sin = math.cos(t), math.sin(t)
        return cls(cos, -sin, cx - cos * cx + sin * cy, sin, cos, cy - sin * cx - cos * cy)

    @classmethod
    def shear_x(cls, degrees: float, cx: float = 0.0, cy: float = 0.0) -> AffineTransform:
        """Horizontal shear: x gains tan(degrees) per unit of (y - cy)."""
        s = math.tan(math.radians(degrees))
        return cls(1.0, s, -s * cy, 0.0, 1.0, 0.0)

    @classmethod
    def shear_y(cls, degrees: float, cx: float = 0.0, cy: float = 0.0) -> AffineTransform:
        s = math.tan(math.radians(degrees))
        return cls(1.0, 0.0, 0.0, s, 1.0, -s * cx)

    @classmethod
    def hflip(cls, width: float) -> AffineTransform:
        return cls(-1.0, 0.0, width, 0.0, 1.0, 0.0)

    def compose(self, inner: AffineTransform) -> AffineTransform:
        """The map applying ``inner`` first, then ``self``."""
        a = self.a * inner.a + self.b * inner.d
        b = self.a * inner.b + self.b * inner.e
        c = self.a * inner.c + self.b * inner.f + self.c
        d = self.d * inner.a + self.e * inner.d
        e = self.d * inner.b + self.e * inner.e
        f = self.d * inner.c + self.e * inner.f + self.f
        return AffineTransform(a, b, c, d, e, f)

    def invert(self) -> AffineTransform:
        det = self.det
        ia = self.e / det
        ib = -self.b / det
        id_ = -self.d / det
        ie = self.a / det
        ic = -(ia * self.c + ib * self.f)
        if_ = -(id_ * self.c + ie * self.f)
        return AffineTransform(ia, ib, ic, id_, ie, if_)

    def apply_point(self, x: float, y: float) -> tuple[float, float]:
        return (self.a * x + self.b * y + self.c, self.d * x + self.e * y + self.f)

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        """Map an (N, 2) array of (x, y) points."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ np.array([[self.a, self.d], [self.b, self.e]]) + np.array([self.c, self.f])

    def is_identity(self, tol: float = 0.0) -> bool:
        ref = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
        vals = (self.a, self.b, self.c, self.d, self.e, self.f)
        return all(abs(v - r) <= tol for v, r in zip(vals, ref))


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) xyxy arrays -> (N,M)."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix2 - ix1, 0.0, None)
    ih = np.clip(iy2 - iy1, 0.0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=inter > 0)
    return out


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Boxes are visited in descending score (equal scores: lower input index
    first); a box is suppressed when its IoU with an already-kept box of the
    same class exceeds the threshold. Boxes of different classes never
    suppress each other. Output is sorted by descending score.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1]: {iou_threshold}")
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = np.array([dets[i].box.astuple() for i in order], dtype=np.float64)
    classes = np.array([dets[i].class_id for i in order])
    keep_global = np.zeros(len(dets), dtype=bool)
    for c in np.unique(classes):
        rows = np.flatnonzero(classes == c)
        mask = kernels.greedy_nms_mask(boxes[rows], float(iou_threshold))
        keep_global[rows[mask]] = True
    return [dets[order[i]] for i in range(len(order)) if keep_global[i]]


def transform_box(t: AffineTransform, b: Box, image_w: float, image_h: float) -> Box | None:
    """Map a box through an affine transform, as the clipped hull of its corners.

    Returns the axis-aligned hull of the four mapped corners, clipped to the
    image rectangle, or None when the clipped hull is thinner than 1 pixel.
    """
    pts = t.apply_points(b.corners())
    x1 = max(float(pts[:, 0].min()), 0.0)
    y1 = max(float(pts[:, 1].min()), 0.0)
    x2 = min(float(pts[:, 0].max()), float(image_w))
    y2 = min(float(pts[:, 1].max()), float(image_h))
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        return None
    return Box(x1, y1, x2, y2)
