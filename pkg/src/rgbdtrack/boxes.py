"""Axis-aligned box arithmetic shared by the tracker and the metrics.

Boxes are continuous (x, y, w, h) float arrays: top-left corner plus size,
in pixel units where pixel j spans [j, j+1). All functions are pure.
"""

from __future__ import annotations

import numpy as np


def as_box(b) -> np.ndarray:
    arr = np.asarray(b, dtype=np.float64)
    if arr.shape != (4,):
        raise ValueError(f"box must be (x, y, w, h), got shape {arr.shape}")
    return arr


def center(b) -> tuple[float, float]:
    x, y, w, h = as_box(b)
    return x + w / 2.0, y + h / 2.0


def from_center(cx: float, cy: float, w: float, h: float) -> np.ndarray:
    return np.array([cx - w / 2.0, cy - h / 2.0, w, h])


def iou(a, b) -> float:
    """Intersection over union; 0 for disjoint or degenerate boxes."""
    ax, ay, aw, ah = as_box(a)
    bx, by, bw, bh = as_box(b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def clamp_to_frame(b, frame_w: float, frame_h: float,
                   min_size: float = 1.0) -> np.ndarray:
    """Shrink/shift a box so it lies inside [0, W] x [0, H] with positive size."""
    x, y, w, h = as_box(b)
    w = min(max(w, min_size), frame_w)
    h = min(max(h, min_size), frame_h)
    x = min(max(x, 0.0), frame_w - w)
    y = min(max(y, 0.0), frame_h - h)
    return np.array([x, y, w, h])


def flip_horizontal(b, width: float) -> np.ndarray:
    """Mirror across the vertical axis of a frame/patch of the given width."""
    x, y, w, h = as_box(b)
    return np.array([width - x - w, y, w, h])
