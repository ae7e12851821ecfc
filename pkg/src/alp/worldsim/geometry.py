"""Vectorized 2D segment geometry used by scene generation, collision and raycasting."""
from __future__ import annotations

import numpy as np


def point_segment_distance(points: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Distances from each point (M,2) to each segment (S,4) -> (M,S)."""
    p = np.asarray(points, dtype=np.float64)[:, None, :]
    a = segs[None, :, 0:2]
    e = segs[None, :, 2:4] - segs[None, :, 0:2]
    ee = np.sum(e * e, axis=-1)
    t = np.sum((p - a) * e, axis=-1) / np.where(ee > 0, ee, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * e
    return np.sqrt(np.sum((p - closest) ** 2, axis=-1))


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def segments_intersect(p0, p1, segs: np.ndarray) -> np.ndarray:
    """Whether segment p0-p1 properly or touchingly intersects each segment (S,)."""
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    ex = segs[:, 2] - segs[:, 0]
    ey = segs[:, 3] - segs[:, 1]
    denom = _cross(dx, dy, ex, ey)
    qx = segs[:, 0] - p0[0]
    qy = segs[:, 1] - p0[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = _cross(qx, qy, ex, ey) / denom
        u = _cross(qx, qy, dx, dy) / denom
    return (denom != 0) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)


def segment_segment_distance(p0, p1, segs: np.ndarray) -> np.ndarray:
    """Minimum distance between segment p0-p1 and each segment (S,4)."""
    if len(segs) == 0:
        return np.zeros(0)
    path = np.array([[p0[0], p0[1], p1[0], p1[1]]], dtype=np.float64)
    d = np.minimum(
        point_segment_distance(np.array([p0, p1], dtype=np.float64), segs).min(axis=0),
        point_segment_distance(segs[:, 0:2], path)[:, 0],
    )
    d = np.minimum(d, point_segment_distance(segs[:, 2:4], path)[:, 0])
    d[segments_intersect(p0, p1, segs)] = 0.0
    return d


def ray_segment(origin, dirs: np.ndarray, segs: np.ndarray):
    """Intersect rays ``origin + s * dirs[i]`` with segments.

    Returns ``(s, u)`` arrays of shape (R,S); misses have ``s = inf``. ``u`` is the
    fractional position along the segment.
    """
    dx = dirs[:, 0:1]
    dy = dirs[:, 1:2]
    ax = segs[None, :, 0]
    ay = segs[None, :, 1]
    ex = segs[None, :, 2] - ax
    ey = segs[None, :, 3] - ay
    denom = _cross(dx, dy, ex, ey)
    qx = ax - origin[0]
    qy = ay - origin[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = _cross(qx, qy, ex, ey) / denom
        u = _cross(qx, qy, dx, dy) / denom
    ok = (denom != 0) & (s > 1e-9) & (u >= 0) & (u <= 1)
    return np.where(ok, s, np.inf), np.where(ok, u, 0.0)


def rect_segments(x0, y0, x1, y1) -> np.ndarray:
    return np.array([
        [x0, y0, x1, y0],
        [x1, y0, x1, y1],
        [x1, y1, x0, y1],
        [x0, y1, x0, y0],
    ], dtype=np.float64)


def points_in_rects(points: np.ndarray, rects: np.ndarray) -> np.ndarray:
    """(M,2) points vs (K,4) rects [x0,y0,x1,y1] -> (M,K) containment."""
    if len(rects) == 0:
        return np.zeros((len(points), 0), dtype=bool)
    x = points[:, 0:1]
    y = points[:, 1:2]
    return (x >= rects[None, :, 0]) & (x <= rects[None, :, 2]) & (y >= rects[None, :, 1]) & (y <= rects[None, :, 3])
