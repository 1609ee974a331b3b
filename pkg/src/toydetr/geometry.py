"""Boxes in normalized center-size form and the IoU / GIoU family.

Three flavours are provided: scalar functions on :class:`BBox`, vectorized
pairwise matrices on ``(n, 4)`` arrays (used by matching and metrics), and
row-aligned differentiable versions on :class:`~toydetr.autodiff.Value`
(used by the losses).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Value, as_value, maximum, minimum
from .errors import ShapeError, ValidationError

# union/enclosure floor; only matters for zero-area boxes
AREA_EPS = 1e-12


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValidationError(f"negative box size: w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        if x2 < x1 or y2 < y1:
            raise ValidationError(f"corner box has x2<x1 or y2<y1: {(x1, y1, x2, y2)}")
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def _iou_giou_scalar(a: BBox, b: BBox):
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    enclose = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    degenerate = a.area == 0 and b.area == 0
    # min: identical boxes can round one ulp above 1
    iou = min(inter / max(union, AREA_EPS), 1.0)
    giou = iou - max(enclose - union, 0.0) / max(enclose, AREA_EPS)
    return iou, giou, degenerate


def iou(a: BBox, b: BBox, return_flag: bool = False):
    """Intersection over union.

    Two zero-area boxes give 0; with ``return_flag`` the result is
    ``(value, degenerate)`` so callers can tell that case apart.
    """
    value, _, degenerate = _iou_giou_scalar(a, b)
    if degenerate:
        value = 0.0
    return (value, degenerate) if return_flag else value


def giou(a: BBox, b: BBox, return_flag: bool = False):
    """Generalized IoU, ``IoU - (C - U) / C`` with ``C`` the enclosing box area."""
    _, value, degenerate = _iou_giou_scalar(a, b)
    return (value, degenerate) if return_flag else value


def l1_box(a: BBox, b: BBox) -> float:
    return abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)


def pairwise_iou_giou(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """IoU and GIoU for every pair of rows; ``a`` is (n, 4), ``b`` is (m, 4), cxcywh.

    Returns two (n, m) arrays.
    """
    A = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))[:, None, :]
    B = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))[None, :, :]
    area_a = (A[..., 2] - A[..., 0]) * (A[..., 3] - A[..., 1])
    area_b = (B[..., 2] - B[..., 0]) * (B[..., 3] - B[..., 1])
    iw = np.clip(np.minimum(A[..., 2], B[..., 2]) - np.maximum(A[..., 0], B[..., 0]), 0, None)
    ih = np.clip(np.minimum(A[..., 3], B[..., 3]) - np.maximum(A[..., 1], B[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = np.maximum(A[..., 2], B[..., 2]) - np.minimum(A[..., 0], B[..., 0])
    eh = np.maximum(A[..., 3], B[..., 3]) - np.minimum(A[..., 1], B[..., 1])
    enclose = ew * eh
    iou_m = np.minimum(inter / np.maximum(union, AREA_EPS), 1.0)
    iou_m = np.where((area_a == 0) & (area_b == 0), 0.0, iou_m)
    giou_m = iou_m - np.maximum(enclose - union, 0.0) / np.maximum(enclose, AREA_EPS)
    return iou_m, giou_m


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.abs(a[:, None, :] - b[None, :, :]).sum(-1)


def diff_iou_giou(pred: Value, target) -> tuple[Value, Value]:
    """Row-aligned IoU and GIoU between ``pred`` (n, 4) and ``target`` (n, 4), cxcywh.

    Differentiable in both arguments; returns two (n,) values.
    """
    pred, target = as_value(pred), as_value(target)
    if pred.shape != target.shape or pred.shape[-1] != 4:
        raise ShapeError(f"box arrays must both be (n, 4): {pred.shape} vs {target.shape}")

    def corners(b):
        cx, cy, w, h = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
        return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5, w * h

    px1, py1, px2, py2, pa = corners(pred)
    tx1, ty1, tx2, ty2, ta = corners(target)
    iw = (minimum(px2, tx2) - maximum(px1, tx1)).clamp_min(0.0)
    ih = (minimum(py2, ty2) - maximum(py1, ty1)).clamp_min(0.0)
    inter = iw * ih
    union = pa + ta - inter
    iou_v = inter / union.clamp_min(AREA_EPS)
    enclose = (maximum(px2, tx2) - minimum(px1, tx1)) * (maximum(py2, ty2) - minimum(py1, ty1))
    giou_v = iou_v - (enclose - union) / enclose.clamp_min(AREA_EPS)
    return iou_v, giou_v


def diff_l1(pred: Value, target) -> Value:
    """Row-aligned sum of absolute coordinate differences; returns (n,)."""
    return (as_value(pred) - as_value(target)).abs().sum(axis=1)
