"""Quaternion algebra, rigid registration to a frontal template, landmark I/O.

Conventions: quaternions are scalar-first ``(w, x, y, z)`` numpy arrays,
landmark sets are ``(68, 3)`` arrays in a right-handed frame with +y up and
+z toward the camera, and the face bounding box maps to [-1, 1].
Rotations act on column vectors about the origin: ``p' = R(q) @ p``.
"""

from __future__ import annotations

import json
from importlib import resources
from typing import NamedTuple

import numpy as np

from .errors import DegenerateConfiguration, NotNormalized, ShapeMismatch, ZeroQuaternion

N_POINTS = 68

JAW = tuple(range(0, 17))
RIGHT_BROW = tuple(range(17, 22))
LEFT_BROW = tuple(range(22, 27))
NOSE_BRIDGE = tuple(range(27, 31))
NOSE_BASE = tuple(range(31, 36))
RIGHT_EYE = tuple(range(36, 42))
LEFT_EYE = tuple(range(42, 48))
OUTER_LIP = tuple(range(48, 60))
INNER_LIP = tuple(range(60, 68))
LIPS = OUTER_LIP + INNER_LIP

# index of the horizontally mirrored counterpart of each landmark
MIRROR = np.array(
    list(range(16, -1, -1))
    + list(range(26, 16, -1))
    + [27, 28, 29, 30]
    + [35, 34, 33, 32, 31]
    + [45, 44, 43, 42, 47, 46]
    + [39, 38, 37, 36, 41, 40]
    + [54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55]
    + [64, 63, 62, 61, 60, 67, 66, 65]
)

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

_NORM_EPS = 1e-12
_UNIT_TOL = 1e-6


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n <= _NORM_EPS:
        raise ZeroQuaternion(f"cannot normalize quaternion with norm {n:.3g}")
    return q / n


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_canonical(q) -> np.ndarray:
    """Flip sign so that ``w >= 0``; q and -q encode the same rotation."""
    q = np.asarray(q, dtype=np.float64)
    return -q if q[0] < 0 else q.copy()


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_angle(a, b) -> float:
    """Geodesic angle in radians between the rotations encoded by ``a`` and ``b``."""
    d = abs(float(np.dot(quat_normalize(a), quat_normalize(b))))
    return 2.0 * float(np.arccos(min(1.0, d)))


def _check_unit(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ShapeMismatch(f"quaternion must have shape (4,), got {q.shape}")
    if abs(np.linalg.norm(q) - 1.0) > _UNIT_TOL:
        raise NotNormalized(f"quaternion norm {np.linalg.norm(q):.9f} is not 1")
    return q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = _check_unit(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def apply_rotation(points, q) -> np.ndarray:
    """Rotate an ``(n, 3)`` point array about the origin by unit quaternion ``q``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeMismatch(f"points must be (n, 3), got {pts.shape}")
    return pts @ quat_to_matrix(q).T


def slerp(q0, q1, t: float) -> np.ndarray:
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    d = float(np.dot(q0, q1))
    if d < 0:
        q1, d = -q1, -d
    if d > 0.9995:
        return quat_normalize(q0 + t * (q1 - q0))
    theta = np.arccos(d)
    s = np.sin(theta)
    return (np.sin((1 - t) * theta) * q0 + np.sin(t * theta) * q1) / s


def check_landmarks(lm, dims=(3,)) -> np.ndarray:
    lm = np.asarray(lm, dtype=np.float64)
    if lm.ndim != 2 or lm.shape[0] != N_POINTS or lm.shape[1] not in dims:
        raise ShapeMismatch(f"landmark set must be ({N_POINTS}, {dims}), got {lm.shape}")
    return lm


def flatten_xy(lm) -> np.ndarray:
    """68 x {2,3} landmarks to the 136-dim ``[x0, y0, x1, y1, ...]`` vector."""
    lm = np.asarray(lm)
    return lm[..., :2].reshape(*lm.shape[:-2], 2 * N_POINTS)


def unflatten_xy(vec) -> np.ndarray:
    vec = np.asarray(vec)
    return vec.reshape(*vec.shape[:-1], N_POINTS, 2)


# ---------------------------------------------------------------------------
# registration


class Registration(NamedTuple):
    frontal: np.ndarray   # (68, 3), centered, pose removed
    quat: np.ndarray      # rotation taking the template frame to the observed pose
    residual: float       # RMS point distance to the centered template
    centroid: np.ndarray  # translation that was removed


def _horn_quaternion(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Closed-form unit quaternion minimising sum ||R src_i - dst_i||^2 (centered inputs)."""
    s = src.T @ dst
    sxx, sxy, sxz = s[0]
    syx, syy, syz = s[1]
    szx, szy, szz = s[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    _, vecs = np.linalg.eigh(n)
    return quat_canonical(vecs[:, -1])


def register_to_template(lm, tpl, max_iters: int = 10, tol: float = 1e-12) -> Registration:
    """Rigidly align index-corresponding landmarks to a frontal template.

    Correspondence is fixed by landmark semantics, so each ICP round reduces to
    a least-squares rotation fit of the current frontal estimate against the
    template; rounds repeat until the incremental rotation angle drops below
    ``tol``. Returns the frontalized points, the pose quaternion with ``w >= 0``
    such that ``lm - centroid ~= apply_rotation(tpl_centered, quat)``, and the
    RMS residual.
    """
    lm = check_landmarks(lm)
    tpl = check_landmarks(tpl)
    centroid = lm.mean(axis=0)
    centered = lm - centroid
    target = tpl - tpl.mean(axis=0)

    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] <= _NORM_EPS or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("landmark covariance is rank deficient (collinear points)")

    q = IDENTITY.copy()
    frontal = centered
    for _ in range(max(1, max_iters)):
        step = _horn_quaternion(target, frontal)
        q = quat_canonical(quat_normalize(quat_multiply(q, step)))
        frontal = apply_rotation(centered, quat_conjugate(q))
        if 2.0 * np.arccos(min(1.0, abs(step[0]))) < tol:
            break
    residual = float(np.sqrt(np.mean(np.sum((frontal - target) ** 2, axis=1))))
    return Registration(frontal, q, residual, centroid)


# ---------------------------------------------------------------------------
# frontal template

TEMPLATE_VERSION = 1


def build_frontal_template() -> np.ndarray:
    """Procedural mean face: mirror-symmetric about x = 0 and centered at the origin."""
    pts = np.zeros((N_POINTS, 3))
    phi = np.linspace(0.0, np.pi, 17)
    pts[0:17, 0] = -0.78 * np.cos(phi)
    pts[0:17, 1] = 0.12 - 0.82 * np.sin(phi)
    pts[0:17, 2] = -0.45 + 0.45 * np.sin(phi)

    s = np.linspace(0.0, 1.0, 5)
    bx = -0.66 + 0.5 * s
    by = 0.48 + 0.09 * np.sin(np.pi * (0.2 + 0.7 * s))
    bz = 0.1 + 0.12 * s
    pts[17:22] = np.stack([bx, by, bz], axis=1)

    pts[27:31] = np.stack([np.zeros(4), np.linspace(0.34, 0.0, 4), np.linspace(0.22, 0.46, 4)], axis=1)
    pts[31:36] = np.stack([
        np.array([-0.15, -0.075, 0.0, 0.075, 0.15]),
        np.array([-0.07, -0.1, -0.11, -0.1, -0.07]),
        np.array([0.3, 0.34, 0.37, 0.34, 0.3]),
    ], axis=1)

    cx, cy, w, h = -0.36, 0.28, 0.24, 0.08
    pts[36:42, 0] = cx + np.array([-w / 2, -w / 6, w / 6, w / 2, w / 6, -w / 6])
    pts[36:42, 1] = cy + np.array([0.0, h / 2, h / 2, 0.0, -h / 2, -h / 2])
    pts[36:42, 2] = 0.18 + np.array([-0.04, 0.0, 0.01, 0.02, 0.01, 0.0])

    my = -0.42
    outer_x = np.array([-0.28, -0.18, -0.08, 0.0, 0.08, 0.18, 0.28, 0.18, 0.08, 0.0, -0.08, -0.18])
    outer_y = my + np.array([0.0, 0.07, 0.1, 0.09, 0.1, 0.07, 0.0, -0.07, -0.1, -0.11, -0.1, -0.07])
    inner_x = np.array([-0.2, -0.08, 0.0, 0.08, 0.2, 0.08, 0.0, -0.08])
    inner_y = my + np.array([0.0, 0.025, 0.025, 0.025, 0.0, -0.025, -0.025, -0.025])
    pts[48:60, 0], pts[48:60, 1] = outer_x, outer_y
    pts[60:68, 0], pts[60:68, 1] = inner_x, inner_y
    pts[48:68, 2] = 0.32 - 0.5 * pts[48:68, 0] ** 2

    flip = np.array([-1.0, 1.0, 1.0])
    for i in RIGHT_BROW + RIGHT_EYE:
        pts[MIRROR[i]] = pts[i] * flip
    pts = 0.5 * (pts + pts[MIRROR] * flip)
    return pts - pts.mean(axis=0)


def load_frontal_template() -> np.ndarray:
    with resources.files("talkinghead.assets").joinpath("frontal_template.json").open() as fh:
        data = json.load(fh)
    if data["version"] != TEMPLATE_VERSION:
        raise ValueError(f"unsupported template version {data['version']}")
    return check_landmarks(np.array(data["points"], dtype=np.float64))


# ---------------------------------------------------------------------------
# landmark JSON frames


def frame_to_json(points, quat=None) -> dict:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[1] == 2:
        pts = np.concatenate([pts, np.zeros((pts.shape[0], 1))], axis=1)
    quat = IDENTITY if quat is None else quat
    return {"points": [[float(v) for v in p] for p in pts], "quat": [float(v) for v in quat]}


def frame_from_json(obj) -> tuple[np.ndarray, np.ndarray]:
    pts = check_landmarks(np.array(obj["points"], dtype=np.float64))
    quat = np.array(obj.get("quat", IDENTITY), dtype=np.float64)
    return pts, quat


def read_landmark_frame(path) -> tuple[np.ndarray, np.ndarray]:
    """File-based landmark adapter: read one precomputed landmark frame."""
    with open(path) as fh:
        obj = json.load(fh)
    if "frames" in obj:
        obj = obj["frames"][0]
    return frame_from_json(obj)
