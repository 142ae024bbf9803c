"""Polyline simplification and mask polygonization.

Used to imitate coarser human annotation styles: a mask boundary is traced,
simplified with Douglas-Peucker, and the polygon is filled back in.
"""

from __future__ import annotations

import numpy as np
from skimage import measure

from .errors import ValidationError


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to the closed segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(*(points - a).T)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(points - proj).T)


def douglas_peucker(polyline, tolerance: float) -> np.ndarray:
    """Simplify ``polyline`` (N x 2) keeping points farther than ``tolerance``.

    The first and last points are always kept and the output is a subset of
    the input in the original order. Distances are measured to the chord
    segment, so closed contours (first == last) work too.
    """
    pts = np.asarray(polyline, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValidationError(f"polyline must be N x 2, got shape {pts.shape}")
    if len(pts) < 2:
        raise ValidationError("douglas_peucker needs at least 2 points")
    if tolerance < 0:
        raise ValidationError("tolerance must be >= 0")

    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = _segment_distance(pts[lo + 1:hi], pts[lo], pts[hi])
        i = int(np.argmax(d))
        if d[i] > tolerance:
            mid = lo + 1 + i
            keep[mid] = True
            stack.append((lo, mid))
            stack.append((mid, hi))
    return pts[keep]


def rasterize_polygon(vertices, shape: tuple[int, int]) -> np.ndarray:
    """Even-odd scanline fill of a closed polygon given as (row, col) vertices.

    Pixel (r, c) is inside when its centre is. An edge counts for rows in
    the half-open range [min_row, max_row), and a crossing pair (xa, xb)
    fills columns with xa <= c < xb.
    """
    v = np.asarray(vertices, dtype=float)
    out = np.zeros(shape, dtype=np.uint8)
    if len(v) < 3:
        return out
    if not np.array_equal(v[0], v[-1]):
        v = np.vstack([v, v[:1]])
    y0, x0 = v[:-1, 0], v[:-1, 1]
    y1, x1 = v[1:, 0], v[1:, 1]
    ylo, yhi = np.minimum(y0, y1), np.maximum(y0, y1)
    r_start = max(0, int(np.ceil(ylo.min())))
    r_stop = min(shape[0], int(np.ceil(yhi.max())))
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = (x1 - x0) / (y1 - y0)
    for r in range(r_start, r_stop):
        active = (ylo <= r) & (r < yhi)
        if not active.any():
            continue
        xs = np.sort(x0[active] + (r - y0[active]) * slope[active])
        for xa, xb in zip(xs[0::2], xs[1::2]):
            c0 = max(0, int(np.ceil(xa)))
            c1 = min(shape[1], int(np.ceil(xb)))
            if c1 > c0:
                out[r, c0:c1] = 1
    return out


def trace_contours(mask) -> list[np.ndarray]:
    """Closed marching-squares contours at level 0.5, in (row, col) pixel units."""
    m = np.asarray(mask)
    padded = np.pad(m.astype(float), 1)
    contours = measure.find_contours(padded, 0.5, positive_orientation="high")
    return [c - 1.0 for c in contours]


def _nesting_depths(contours: list[np.ndarray]) -> list[int]:
    depths = []
    for i, c in enumerate(contours):
        probe = c[:1]
        depths.append(sum(
            bool(measure.points_in_poly(probe, other)[0]) for j, other in enumerate(contours) if j != i
        ))
    return depths


def polygonize_mask(mask, tolerance: float) -> np.ndarray:
    """Redraw every object in ``mask`` as a simplified polygon.

    Tolerance 0 returns the mask unchanged. Holes are simplified as well. An
    object whose polygon would enclose no pixel centre keeps its original
    pixels, so no object vanishes.
    """
    m = (np.asarray(mask) > 0).astype(np.uint8)
    if tolerance < 0:
        raise ValidationError("tolerance must be >= 0")
    if tolerance == 0 or not m.any():
        return m.copy()
    contours = trace_contours(m)
    depths = _nesting_depths(contours)
    out = np.zeros_like(m)
    # even depth = boundary of a foreground region, odd depth = hole
    for depth, contour in sorted(zip(depths, contours), key=lambda t: t[0]):
        region = rasterize_polygon(douglas_peucker(contour, tolerance), m.shape)
        if depth % 2 == 0:
            if not region.any():
                region = rasterize_polygon(contour, m.shape)
            out |= region
        else:
            out &= 1 - region
    return out
