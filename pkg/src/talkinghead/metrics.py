"""Lip-synchronisation metrics computed on landmark sequences.

All values are in face-box units: the face bounding box spans [-1, 1] on
both axes, so distances are in half-box widths and areas in their squares.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import DegeneratePolygonWarning, LengthMismatch, ShapeMismatch, TooShort
from .geometry import LIPS, OUTER_LIP

LIP_INDICES = np.array(LIPS)
OUTER_LIP_INDICES = np.array(OUTER_LIP)
UNITS = "face-box units: bounding box mapped to [-1, 1]; areas in units^2"


def _as_points(seq) -> np.ndarray:
    """Accept a LandmarkSequence-like object or a (T, 68, >=2) array."""
    pts = getattr(seq, "points", seq)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[1] != 68 or pts.shape[2] < 2:
        raise ShapeMismatch(f"expected (T, 68, 2|3) landmarks, got {pts.shape}")
    return pts[..., :2]


def _pair(pred, gt):
    p, g = _as_points(pred), _as_points(gt)
    if p.shape != g.shape:
        raise LengthMismatch(f"sequence shapes differ: {p.shape} vs {g.shape}")
    return p, g


def d_ll(pred, gt) -> float:
    """Mean Euclidean distance between predicted and reference lip points."""
    p, g = _pair(pred, gt)
    diff = p[:, LIP_INDICES] - g[:, LIP_INDICES]
    return float(np.linalg.norm(diff, axis=-1).mean())


def d_vl(pred, gt) -> float:
    """Mean Euclidean distance between lip-point first differences."""
    p, g = _pair(pred, gt)
    if p.shape[0] < 2:
        raise TooShort("velocity metric needs at least two frames")
    vp = np.diff(p[:, LIP_INDICES], axis=0)
    vg = np.diff(g[:, LIP_INDICES], axis=0)
    return float(np.linalg.norm(vp - vg, axis=-1).mean())


def _segments_cross(a, b, c, d) -> bool:
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    return o1 * o2 < 0 and o3 * o4 < 0


def is_simple_polygon(poly) -> bool:
    poly = np.asarray(poly)
    n = len(poly)
    for i in range(n):
        for j in range(i + 1, n):
            if abs(i - j) <= 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]):
                return False
    return True


def polygon_area(poly) -> float:
    """Absolute shoelace area; warns when the polygon is not simple."""
    poly = np.asarray(poly, dtype=np.float64)[:, :2]
    x, y = poly[:, 0], poly[:, 1]
    area = 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))
    if not is_simple_polygon(poly):
        warnings.warn("mouth polygon is self-intersecting", DegeneratePolygonWarning, stacklevel=2)
    return area


def mouth_area(frame) -> float:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[0] != 68:
        raise ShapeMismatch(f"expected 68 landmarks, got {frame.shape}")
    return polygon_area(frame[OUTER_LIP_INDICES, :2])


def d_a(pred, gt) -> float:
    """Mean absolute difference of outer-lip polygon areas."""
    p, g = _pair(pred, gt)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegeneratePolygonWarning)
        ap = np.array([mouth_area(f) for f in p])
        ag = np.array([mouth_area(f) for f in g])
    return float(np.abs(ap - ag).mean())


def report(pred, gt) -> dict:
    p, g = _pair(pred, gt)
    return {
        "d_ll": d_ll(p, g),
        "d_vl": d_vl(p, g) if len(p) >= 2 else None,
        "d_a": d_a(p, g),
        "frames": int(p.shape[0]),
        "units": UNITS,
    }


def format_table(rep: dict) -> str:
    rows = [("D-LL", rep["d_ll"]), ("D-VL", rep["d_vl"]), ("D-A", rep["d_a"])]
    lines = [f"{'metric':<8}{'value':>12}", "-" * 20]
    for name, val in rows:
        lines.append(f"{name:<8}{'n/a' if val is None else f'{val:.6f}':>12}")
    lines.append(f"frames: {rep['frames']}")
    lines.append(f"units: {rep['units']}")
    return "\n".join(lines)
