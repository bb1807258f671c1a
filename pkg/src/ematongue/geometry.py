"""Small rotation and alignment helpers shared by the pipeline stages.

Conventions: right-handed, millimetres, +y anterior, +z superior.
Quaternions are stored scalar-first ``(w, x, y, z)``.
"""
from __future__ import annotations

import numpy as np

_EPS = 1e-12


class DegenerateGeometryError(ValueError):
    """Raised when a point set cannot define a unique alignment."""


def normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


def cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product over the last axis; far cheaper than ``np.cross`` for small arrays."""
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit ``axis``."""
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def swing_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking unit vector ``a`` onto unit vector ``b``."""
    axis = cross3(a, b)
    c = float(a @ b)
    if 1.0 + c < 1e-12:
        # antiparallel: half turn about any axis orthogonal to a
        ref = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        perp = normalize(cross3(a, ref))
        return 2.0 * np.outer(perp, perp) - np.eye(3)
    k = skew(axis)
    return np.eye(3) + k + (k @ k) / (1.0 + c)


def swing_apply(a: np.ndarray, b: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``swing_matrix(a, b) @ v`` without forming the matrix."""
    axis = cross3(a, b)
    c = float(a @ b)
    if 1.0 + c < 1e-12:
        return swing_matrix(a, b) @ v
    return c * v + cross3(axis, v) + axis * (axis @ v) / (1.0 + c)


def rest_frame(direction: np.ndarray, roll: float) -> np.ndarray:
    """Bone frame whose y column is ``direction``, rolled by ``roll`` radians.

    Zero roll is the minimal rotation of world +y onto the bone axis.
    """
    y = np.array([0.0, 1.0, 0.0])
    base = swing_matrix(y, direction)
    return axis_angle_matrix(direction, roll) @ base


def coil_frame(direction: np.ndarray) -> np.ndarray:
    """Deterministic completion of a 5-DOF coil direction to a full frame.

    Columns are ``(u, v, d)`` with ``v`` the projection of world +z onto the
    plane orthogonal to ``d`` (world +y when ``d`` is nearly vertical) and
    ``u = v x d``.  A coil pointing along +z therefore has the identity frame.
    """
    d = np.asarray(direction, dtype=float)
    up = np.array([0.0, 0.0, 1.0])
    v = up - (up @ d) * d
    if np.linalg.norm(v) < 1e-6:
        up = np.array([0.0, 1.0, 0.0])
        v = up - (up @ d) * d
    v = v / np.linalg.norm(v)
    u = cross3(v, d)
    return np.column_stack([u, v, d])


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation matrix, with w >= 0."""
    tr = np.trace(m)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def check_non_collinear(points: np.ndarray, tol: float = 1e-9) -> None:
    """Raise :class:`DegenerateGeometryError` unless ``points`` span a plane."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise DegenerateGeometryError("degenerate landmark set: need at least 3 points")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] < _EPS or sv[1] <= tol * sv[0]:
        raise DegenerateGeometryError("degenerate landmark set: points are collinear")


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares similarity ``dst ~ s * R @ src + t``.

    Returns ``(s, R, t)`` with ``det(R) = +1``; ``s`` is 1 when
    ``with_scale`` is false.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape:
        raise ValueError("source and target landmark counts differ")
    check_non_collinear(src)
    check_non_collinear(dst)
    n = len(src)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    cov = b.T @ a / n
    u, sig, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        d[2] = -1.0
    rot = u @ np.diag(d) @ vt
    if with_scale:
        var_s = (a * a).sum() / n
        s = float((sig * d).sum() / var_s)
    else:
        s = 1.0
    t = mu_d - s * rot @ mu_s
    return s, rot, t
