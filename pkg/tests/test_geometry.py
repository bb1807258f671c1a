from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ematongue.geometry import (
    DegenerateGeometryError,
    axis_angle_matrix,
    coil_frame,
    matrix_to_quat,
    quat_to_matrix,
    swing_apply,
    swing_matrix,
    umeyama,
)

unit = st.tuples(*[st.floats(-1, 1)] * 3).map(np.array).filter(lambda v: np.linalg.norm(v) > 0.1).map(
    lambda v: v / np.linalg.norm(v))


@given(unit, unit)
def test_swing_maps_a_to_b(a, b):
    if a @ b < -1 + 1e-6:
        return
    r = swing_matrix(a, b)
    np.testing.assert_allclose(r @ a, b, atol=1e-9)
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
    v = np.array([0.3, -0.2, 0.9])
    np.testing.assert_allclose(swing_apply(a, b, v), r @ v, atol=1e-9)


def test_swing_antiparallel():
    a = np.array([0.0, 0.0, 1.0])
    r = swing_matrix(a, -a)
    np.testing.assert_allclose(r @ a, -a, atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


@given(unit)
def test_coil_frame_orthonormal_and_d_column(d):
    f = coil_frame(d)
    np.testing.assert_allclose(f.T @ f, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(f[:, 2], d, atol=1e-15)
    assert np.linalg.det(f) == pytest.approx(1.0)


def test_coil_frame_vertical_is_identity_and_fallback():
    np.testing.assert_allclose(coil_frame(np.array([0.0, 0.0, 1.0])), np.eye(3), atol=1e-15)
    f = coil_frame(np.array([0.0, 0.0, -1.0]))
    np.testing.assert_allclose(f[:, 1], [0, 1, 0], atol=1e-15)


@given(unit, st.floats(-3.1, 3.1))
def test_quaternion_round_trip(axis, angle):
    r = axis_angle_matrix(axis, angle)
    q = matrix_to_quat(r)
    assert q[0] >= 0
    assert np.linalg.norm(q) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(quat_to_matrix(q), r, atol=1e-12)


@given(st.integers(0, 10**6))
def test_umeyama_recovers_similarity(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(0, 10, (6, 3))
    axis = rng.normal(size=3)
    r = axis_angle_matrix(axis / np.linalg.norm(axis), rng.uniform(-3, 3))
    s = rng.uniform(0.5, 2.0)
    t = rng.normal(0, 20, 3)
    s2, r2, t2 = umeyama(src, s * src @ r.T + t)
    assert s2 == pytest.approx(s, rel=1e-9)
    np.testing.assert_allclose(r2, r, atol=1e-9)
    np.testing.assert_allclose(t2, t, atol=1e-8)


def test_umeyama_collinear_raises():
    pts = np.array([[0.0, 0, 0], [1, 1, 1], [2, 2, 2]])
    with pytest.raises(DegenerateGeometryError, match="degenerate landmark set"):
        umeyama(pts, pts)
