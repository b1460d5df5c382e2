"""Axis-aligned box arithmetic: IoU, generalized IoU with gradients, NMS.

Boxes are normalized image coordinates in center form (cx, cy, w, h).
Scalar operations compute in float64; the vectorized pairwise helpers
accept float32 or float64 arrays in corner-free (N, 4) center form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DegenerateBoxError(ValueError):
    """Raised when an operation requires a box with positive area."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, center form, normalized image coordinates.

    ``cx, cy`` lie in [0, 1]; ``w, h`` are non-negative. Corners may spill
    outside the unit square (e.g. probe windows near a border).
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"non-finite box field {name}={v!r}")
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box extent w={self.w!r} h={self.h!r}")

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) with x1 <= x2 and y1 <= y2."""
        hw = 0.5 * self.w
        hh = 0.5 * self.h
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def max_dim(self) -> float:
        return max(self.w, self.h)

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0.0 when the union has zero area."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        inter = 0.0
    else:
        inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: IoU minus (enclosing hull slack) / hull area.

    Ranges over (-1, 1]; equals IoU when one box contains the other.
    """
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
    union = a.area + b.area - inter
    ew = max(ax2, bx2) - min(ax1, bx1)
    eh = max(ay2, by2) - min(ay1, by1)
    enclose = ew * eh
    if union <= 0.0:
        return 0.0
    value = inter / union
    if enclose > 0.0:
        value -= (enclose - union) / enclose
    return value


# Derivatives of the pred corners w.r.t. (cx, cy, w, h).
_D_PX1 = np.array([1.0, 0.0, -0.5, 0.0])
_D_PX2 = np.array([1.0, 0.0, 0.5, 0.0])
_D_PY1 = np.array([0.0, 1.0, 0.0, -0.5])
_D_PY2 = np.array([0.0, 1.0, 0.0, 0.5])
_ZERO4 = np.zeros(4)


def giou_loss_and_grad(pred: Box, gt: Box) -> tuple[float, np.ndarray]:
    """``1 - giou(pred, gt)`` and its gradient w.r.t. pred's (cx, cy, w, h).

    Ties in the min/max corner selections resolve toward the pred side, so
    at pred == gt the returned gradient is the analytic limit (all zeros).

    Raises:
        DegenerateBoxError: pred has zero width or height.
    """
    if pred.w <= 0.0 or pred.h <= 0.0:
        raise DegenerateBoxError(f"degenerate pred box w={pred.w!r} h={pred.h!r}")
    px1, py1, px2, py2 = pred.corners()
    gx1, gy1, gx2, gy2 = gt.corners()

    ix1, d_ix1 = (px1, _D_PX1) if px1 >= gx1 else (gx1, _ZERO4)
    iy1, d_iy1 = (py1, _D_PY1) if py1 >= gy1 else (gy1, _ZERO4)
    ix2, d_ix2 = (px2, _D_PX2) if px2 <= gx2 else (gx2, _ZERO4)
    iy2, d_iy2 = (py2, _D_PY2) if py2 <= gy2 else (gy2, _ZERO4)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw > 0.0 and ih > 0.0:
        inter = iw * ih
        d_inter = ih * (d_ix2 - d_ix1) + iw * (d_iy2 - d_iy1)
    else:
        inter = 0.0
        d_inter = _ZERO4

    area_p = pred.w * pred.h
    d_area_p = np.array([0.0, 0.0, pred.h, pred.w])
    union = area_p + gt.w * gt.h - inter
    d_union = d_area_p - d_inter

    ex1, d_ex1 = (px1, _D_PX1) if px1 <= gx1 else (gx1, _ZERO4)
    ey1, d_ey1 = (py1, _D_PY1) if py1 <= gy1 else (gy1, _ZERO4)
    ex2, d_ex2 = (px2, _D_PX2) if px2 >= gx2 else (gx2, _ZERO4)
    ey2, d_ey2 = (py2, _D_PY2) if py2 >= gy2 else (gy2, _ZERO4)
    ew = ex2 - ex1
    eh = ey2 - ey1
    enclose = ew * eh
    d_enclose = eh * (d_ex2 - d_ex1) + ew * (d_ey2 - d_ey1)

    # giou = inter/union - (enclose - union)/enclose; both denominators are
    # positive because pred has positive area.
    d_giou = (d_inter * union - inter * d_union) / (union * union)
    d_giou = d_giou + (d_union * enclose - union * d_enclose) / (enclose * enclose)
    value = inter / union - (enclose - union) / enclose
    return 1.0 - value, -d_giou


def nms(boxes: list[Box], scores: list[float], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Visits boxes in descending score order (ties broken by ascending input
    index), keeping a box unless its IoU with an already-kept box exceeds
    ``iou_threshold``. Returns kept indices in visit order.
    """
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes vs {len(scores)} scores")
    if not boxes:
        return []
    arr = boxes_to_array(boxes)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    kept: list[int] = []
    kept_rows: list[np.ndarray] = []
    for idx in order:
        row = arr[idx]
        ok = True
        for other in kept_rows:
            if _iou_rows(row, other) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(int(idx))
            kept_rows.append(row)
    return kept


def _iou_rows(a: np.ndarray, b: np.ndarray) -> float:
    iw = min(a[0] + 0.5 * a[2], b[0] + 0.5 * b[2]) - max(a[0] - 0.5 * a[2], b[0] - 0.5 * b[2])
    ih = min(a[1] + 0.5 * a[3], b[1] + 0.5 * b[3]) - max(a[1] - 0.5 * a[3], b[1] - 0.5 * b[3])
    inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0.0 else 0.0


def boxes_to_array(boxes: list[Box]) -> np.ndarray:
    """(N, 4) float64 center-form array."""
    out = np.empty((len(boxes), 4), dtype=np.float64)
    for i, b in enumerate(boxes):
        out[i, 0] = b.cx
        out[i, 1] = b.cy
        out[i, 2] = b.w
        out[i, 3] = b.h
    return out


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of every row of ``a`` (N, 4) against every row of ``b`` (M, 4)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax1 = a[:, 0] - 0.5 * a[:, 2]
    ax2 = a[:, 0] + 0.5 * a[:, 2]
    ay1 = a[:, 1] - 0.5 * a[:, 3]
    ay2 = a[:, 1] + 0.5 * a[:, 3]
    bx1 = b[:, 0] - 0.5 * b[:, 2]
    bx2 = b[:, 0] + 0.5 * b[:, 2]
    by1 = b[:, 1] - 0.5 * b[:, 3]
    by2 = b[:, 1] + 0.5 * b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0.0, inter / union, 0.0)
    return out


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Generalized IoU of every row of ``a`` against every row of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax1 = a[:, 0] - 0.5 * a[:, 2]
    ax2 = a[:, 0] + 0.5 * a[:, 2]
    ay1 = a[:, 1] - 0.5 * a[:, 3]
    ay2 = a[:, 1] + 0.5 * a[:, 3]
    bx1 = b[:, 0] - 0.5 * b[:, 2]
    bx2 = b[:, 0] + 0.5 * b[:, 2]
    by1 = b[:, 1] - 0.5 * b[:, 3]
    by2 = b[:, 1] + 0.5 * b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    ew = np.maximum(ax2[:, None], bx2[None, :]) - np.minimum(ax1[:, None], bx1[None, :])
    eh = np.maximum(ay2[:, None], by2[None, :]) - np.minimum(ay1[:, None], by1[None, :])
    enclose = ew * eh
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(union > 0.0, inter / union, 0.0)
        val = val - np.where(enclose > 0.0, (enclose - union) / enclose, 0.0)
        val = np.where(union > 0.0, val, 0.0)
    return val
