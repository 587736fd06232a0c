"""Box primitives: center-format boxes, IoU/GIoU overlap measures and gradients.

The canonical representation is normalized center format (cx, cy, w, h);
corner form (x1, y1, x2, y2) is derived. Scalar operations work on `Box`,
the array helpers (`pairwise_iou`, `pairwise_giou`, `pairwise_l1`,
`giou_with_grad`) work on float arrays of shape (..., 4) in center format
and are what the matching and loss code calls on the hot path.

Boxes are not clamped to the unit square here; only strictly positive
width and height are enforced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in normalized center format."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"box field {name} is not finite: {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box has non-positive size: w={self.w}, h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def to_corners(b: Box) -> tuple[float, float, float, float]:
    """Return (x1, y1, x2, y2) corners of ``b``."""
    return (b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)


def boxes_to_array(boxes) -> np.ndarray:
    """Stack an iterable of Box into an (N, 4) center-format array."""
    items = list(boxes)
    if not items:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([b.as_array() for b in items])


def iou(a: Box, b: Box) -> float:
    """Intersection over union, in [0, 1]."""
    return float(pairwise_iou(a.as_array()[None], b.as_array()[None])[0, 0])


def giou(a: Box, b: Box) -> float:
    """Generalized IoU, in (-1, 1]; defined for disjoint boxes."""
    return float(pairwise_giou(a.as_array()[None], b.as_array()[None])[0, 0])


def l1_box(a: Box, b: Box) -> float:
    """Sum of absolute differences of the four center-format fields."""
    return float(np.abs(a.as_array() - b.as_array()).sum())


def giou_grad(a: Box, b: Box) -> np.ndarray:
    """Analytic d(giou(a, b)) / d(cx, cy, w, h of a) as a 4-vector."""
    _, grad = giou_with_grad(a.as_array()[None], b.as_array()[None])
    return grad[0]


def _corners(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix of shape (N, M) for center-format arrays a:(N,4), b:(M,4)."""
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)

    ix1 = np.maximum(ax1[:, None], bx1[None, :])
    iy1 = np.maximum(ay1[:, None], by1[None, :])
    ix2 = np.minimum(ax2[:, None], bx2[None, :])
    iy2 = np.minimum(ay2[:, None], by2[None, :])
    iw = np.maximum(ix2 - ix1, 0.0)
    ih = np.maximum(iy2 - iy1, 0.0)
    inter = iw * ih

    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU matrix of shape (N, M) for center-format arrays a:(N,4), b:(M,4)."""
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)

    iw = np.maximum(np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :]), 0.0)
    ih = np.maximum(np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :]), 0.0)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter

    ew = np.maximum(ax2[:, None], bx2[None, :]) - np.minimum(ax1[:, None], bx1[None, :])
    eh = np.maximum(ay2[:, None], by2[None, :]) - np.minimum(ay1[:, None], by1[None, :])
    enclose = ew * eh

    return inter / union - (enclose - union) / enclose


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """L1 distance matrix (N, M) over the four center-format fields."""
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)


def giou_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise GIoU of paired boxes plus its gradient w.r.t. ``a``.

    a, b: (M, 4) center-format arrays, paired row by row.
    Returns (giou (M,), grad (M, 4)) with grad columns ordered (cx, cy, w, h).

    Subgradient conventions: the intersection term is active only for
    strictly positive overlap (touching boxes are treated as disjoint),
    and ties inside max/min selections resolve to the first argument.
    """
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)

    ix1 = np.maximum(ax1, bx1)
    iy1 = np.maximum(ay1, by1)
    ix2 = np.minimum(ax2, bx2)
    iy2 = np.minimum(ay2, by2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    union = area_a + area_b - inter

    ex1 = np.minimum(ax1, bx1)
    ey1 = np.minimum(ay1, by1)
    ex2 = np.maximum(ax2, bx2)
    ey2 = np.maximum(ay2, by2)
    ew = ex2 - ex1
    eh = ey2 - ey1
    enclose = ew * eh

    value = inter / union - (enclose - union) / enclose

    # Derivatives of a's corners w.r.t. (cx, cy, w, h): x1 = cx - w/2, etc.
    # Everything below is assembled per corner, then chained to center form.
    act_ix1 = overlap & (ax1 >= bx1)
    act_iy1 = overlap & (ay1 >= by1)
    act_ix2 = overlap & (ax2 <= bx2)
    act_iy2 = overlap & (ay2 <= by2)
    d_inter = {
        "ax1": np.where(act_ix1, -ih, 0.0),
        "ay1": np.where(act_iy1, -iw, 0.0),
        "ax2": np.where(act_ix2, ih, 0.0),
        "ay2": np.where(act_iy2, iw, 0.0),
    }
    d_area_a = {
        "ax1": -(ay2 - ay1),
        "ay1": -(ax2 - ax1),
        "ax2": (ay2 - ay1),
        "ay2": (ax2 - ax1),
    }
    d_enclose = {
        "ax1": np.where(ax1 <= bx1, -eh, 0.0),
        "ay1": np.where(ay1 <= by1, -ew, 0.0),
        "ax2": np.where(ax2 >= bx2, eh, 0.0),
        "ay2": np.where(ay2 >= by2, ew, 0.0),
    }

    grads_corner = {}
    for k in ("ax1", "ay1", "ax2", "ay2"):
        dI = d_inter[k]
        dU = d_area_a[k] - dI
        dE = d_enclose[k]
        d_iou = (dI * union - inter * dU) / union**2
        # d/dx of (E - U)/E = (dE*E - E*... ) simplifies to (dE*U - dU*E... )
        d_dead = ((dE - dU) * enclose - (enclose - union) * dE) / enclose**2
        grads_corner[k] = d_iou - d_dead

    grad = np.empty_like(a)
    grad[:, 0] = grads_corner["ax1"] + grads_corner["ax2"]
    grad[:, 1] = grads_corner["ay1"] + grads_corner["ay2"]
    grad[:, 2] = 0.5 * (grads_corner["ax2"] - grads_corner["ax1"])
    grad[:, 3] = 0.5 * (grads_corner["ay2"] - grads_corner["ay1"])
    return value, grad
