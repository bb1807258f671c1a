from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ematongue.ema_io import (
    Annotation,
    CoilLayout,
    EmaSweep,
    ParseError,
    clean,
    format_annotations,
    format_sweep,
    head_correct,
    noise_sigma,
    parse_annotations,
    parse_layout,
    parse_palate,
    parse_sweep,
    resample,
)
from ematongue.geometry import DegenerateGeometryError, axis_angle_matrix


def make_sweep(pos, dirs=None, rate=200.0, names=None, valid=None, annotations=()):
    pos = np.asarray(pos, dtype=float)
    n, c = pos.shape[:2]
    if dirs is None:
        dirs = np.broadcast_to([0.0, 0.0, 1.0], pos.shape).copy()
    names = names or tuple(f"C{i}" for i in range(c))
    valid = np.ones((n, c), dtype=bool) if valid is None else valid
    return EmaSweep(rate, tuple(names), pos, np.asarray(dirs, dtype=float), valid, tuple(annotations))


REFS = {"NOSE": [0.0, 45.0, 55.0], "EAR_L": [-70.0, -55.0, 35.0], "EAR_R": [70.0, -55.0, 35.0]}
LAYOUT = CoilLayout((("TT", "tongue"), ("TB", "tongue"), ("NOSE", "reference"), ("EAR_L", "reference"),
                     ("EAR_R", "reference")))


def head_sweep(n=20, seed=0):
    rng = np.random.default_rng(seed)
    names = ("TT", "TB", "NOSE", "EAR_L", "EAR_R")
    pos = np.empty((n, 5, 3))
    pos[:, :2] = rng.normal(0, 10, (n, 2, 3))
    for k, r in enumerate(("NOSE", "EAR_L", "EAR_R")):
        pos[:, 2 + k] = REFS[r]
    d = rng.normal(size=(n, 5, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return make_sweep(pos, d, names=names)


# ---------------------------------------------------------------- parsing


def test_parse_eight_coils_thousand_rows():
    names = [f"K{i}" for i in range(8)]
    header = "frame," + ",".join(f"{n}_{a}" for n in names for a in ("x", "y", "z", "dx", "dy", "dz"))
    row = ",".join(["1.0", "2.0", "3.0", "0", "0", "1"] * 8)
    text = "#rate=200\n" + header + "\n" + "\n".join(f"{i},{row}" for i in range(1000)) + "\n"
    s = parse_sweep(text)
    assert s.n_frames == 1000
    assert len(s.coil_names) == 8
    assert s.duration == pytest.approx(5.0)
    assert s.sample_rate == 200.0


def test_parse_single_row():
    s = parse_sweep("#rate=200\nframe,A_x,A_y,A_z,A_dx,A_dy,A_dz\n0,0,0,0,0,0,1\n")
    assert s.n_frames == 1
    assert s.valid[0, 0]
    np.testing.assert_array_equal(s.directions[0, 0], [0, 0, 1])


def test_nan_marks_only_that_sample():
    text = ("#rate=200\nframe,A_x,A_y,A_z,A_dx,A_dy,A_dz,B_x,B_y,B_z,B_dx,B_dy,B_dz\n"
            "0,nan,0,0,0,0,1,1,1,1,0,1,0\n"
            "1,0,0,0,0,0,1,1,1,1,0,1,0\n")
    s = parse_sweep(text)
    assert not s.valid[0, 0]
    assert s.valid[0, 1] and s.valid[1, 0] and s.valid[1, 1]


def test_empty_field_is_invalid_and_directions_renormalised():
    text = "#rate=100\nframe,A_x,A_y,A_z,A_dx,A_dy,A_dz\n0,1,2,3,0,0,2\n1,,,,,,\n"
    s = parse_sweep(text)
    np.testing.assert_allclose(s.directions[0, 0], [0, 0, 1])
    assert not s.valid[1, 0]


@pytest.mark.parametrize(
    "text, line",
    [
        ("#rate=200\nframe,A_x,A_y\n0,1,2\n", 2),
        ("#rate=200\nframe,A_x,A_y,A_z,A_dx,A_dy,A_dz\n0,1,2,3\n", 3),
        ("#rate=200\nframe,A_x,A_y,A_z,A_dx,A_dy,A_dz\n", 3),
        ("#rate=0\nframe,A_x,A_y,A_z,A_dx,A_dy,A_dz\n0,0,0,0,0,0,1\n", 1),
        ("#rate=200\nframe,A_x,A_y,A_z,A_dx,A_dy,A_dz\n0,0,0,0,0,0,1\n1,0,zz,0,0,0,1\n", 4),
        ("#rate=200\nframe,A_x,A_y,A_z,B_dx,A_dy,A_dz\n0,0,0,0,0,0,1\n", 2),
    ],
)
def test_parse_errors_name_line(text, line):
    with pytest.raises(ParseError) as exc:
        parse_sweep(text)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_explicit_rate_overrides_header():
    s = parse_sweep("#rate=200\nframe,A_x,A_y,A_z,A_dx,A_dy,A_dz\n0,0,0,0,0,0,1\n", sample_rate=100)
    assert s.sample_rate == 100


GOLDEN_SWEEP = (
    "#rate=200.0\n"
    "frame,TT_x,TT_y,TT_z,TT_dx,TT_dy,TT_dz,UL_x,UL_y,UL_z,UL_dx,UL_dy,UL_dz\n"
    "0,0.1,-2.5,3.0,0.0,0.0,1.0,,,,,,\n"
    "1,0.30000000000000004,1e-07,12.0,0.6,0.8,0.0,1.0,2.0,3.0,1.0,0.0,0.0\n"
)


def test_sweep_golden_layout():
    s = parse_sweep(GOLDEN_SWEEP)
    assert format_sweep(s) == GOLDEN_SWEEP


@given(st.lists(st.floats(-200, 200, allow_nan=False), min_size=6, max_size=60), st.integers(0, 10**6))
def test_sweep_round_trip_exact(values, seed):
    rng = np.random.default_rng(seed)
    n = len(values) // 3
    pos = np.asarray(values[: 3 * n]).reshape(n, 1, 3)
    d = rng.normal(size=(n, 1, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    valid = rng.random((n, 1)) > 0.2
    pos[~valid] = np.nan
    s = make_sweep(pos, d, valid=valid)
    back = parse_sweep(format_sweep(s))
    np.testing.assert_array_equal(back.valid, s.valid)
    np.testing.assert_array_equal(back.positions[s.valid], s.positions[s.valid])
    np.testing.assert_allclose(back.directions[s.valid], s.directions[s.valid], atol=1e-15)


def test_annotations_round_trip_and_bounds():
    anns = [Annotation("ta", 0, 5), Annotation("ta", 5, 9)]
    assert parse_annotations(format_annotations(anns)) == anns
    with pytest.raises(ValueError):
        make_sweep(np.zeros((4, 1, 3)), annotations=[Annotation("x", 2, 9)])


def test_layout_and_palate():
    lay = parse_layout('{"TT": "tongue", "NOSE": "reference"}')
    assert lay.reference_names == ["NOSE"]
    with pytest.raises(ValueError):
        parse_layout('{"TT": "elbow"}')
    assert len(parse_palate("0 0 0\n10 0 0\n0 10 0\n").points) == 3
    with pytest.raises(ParseError, match="insufficient points"):
        parse_palate("0 0 0\n1 1 1\n")
    with pytest.raises(ParseError, match="collinear"):
        parse_palate("0 0 0\n1 1 1\n2 2 2\n")


def test_palate_dome_accepted():
    rng = np.random.default_rng(3)
    xy = rng.uniform(-20, 20, (100, 2))
    z = 15.0 - 0.02 * (xy ** 2).sum(axis=1)
    text = "\n".join(f"{x} {y} {zz}" for (x, y), zz in zip(xy, z))
    assert len(parse_palate(text).points) == 100


# --------------------------------------------------------- head correction


def test_head_correct_identity_when_refs_at_pose():
    s = head_sweep()
    out, rep = head_correct(s, LAYOUT, REFS)
    np.testing.assert_allclose(out.positions, s.positions, atol=1e-9)
    np.testing.assert_allclose(out.directions, s.directions, atol=1e-12)
    assert rep.flagged_frames == []


def test_head_correct_removes_known_rigid_motion():
    base = head_sweep(30, seed=1)
    rng = np.random.default_rng(2)
    pos = base.positions.copy()
    dirs = base.directions.copy()
    for f in range(base.n_frames):
        axis = rng.normal(size=3)
        r = axis_angle_matrix(axis / np.linalg.norm(axis), rng.uniform(-0.3, 0.3))
        t = rng.uniform(-10, 10, 3)
        pos[f] = pos[f] @ r.T + t
        dirs[f] = dirs[f] @ r.T
    moved = replace(base, positions=pos, directions=dirs)
    out, rep = head_correct(moved, LAYOUT, REFS)
    np.testing.assert_allclose(out.positions, base.positions, atol=1e-9)
    np.testing.assert_allclose(out.directions, base.directions, atol=1e-9)
    assert rep.residual_rms.max() < 1e-9


def test_head_correct_borrows_when_refs_missing():
    s = head_sweep(10)
    valid = s.valid.copy()
    valid[4, 3] = False  # EAR_L gone: only 2 references
    pos = s.positions.copy()
    pos[4, 3] = np.nan
    s = replace(s, positions=pos, valid=valid)
    out, rep = head_correct(s, LAYOUT, REFS)
    assert rep.flagged_frames == [4]
    assert rep.borrowed_from[4] in (3, 5)
    assert out.valid[4, 0]


def test_head_correct_rejects_collinear_references():
    refs = {"NOSE": [0, 0, 0], "EAR_L": [1, 0, 0], "EAR_R": [2, 0, 0]}
    with pytest.raises(DegenerateGeometryError):
        head_correct(head_sweep(), LAYOUT, refs)


@given(st.integers(0, 10**6))
def test_head_correct_idempotent_and_rigid(seed):
    rng = np.random.default_rng(seed)
    s = head_sweep(5, seed)
    pos = s.positions.copy()
    for f in range(s.n_frames):
        axis = rng.normal(size=3)
        pos[f] = pos[f] @ axis_angle_matrix(axis / np.linalg.norm(axis), rng.uniform(-1, 1)).T + rng.normal(0, 5, 3)
    s = replace(s, positions=pos)
    once, _ = head_correct(s, LAYOUT, REFS)
    twice, _ = head_correct(once, LAYOUT, REFS)
    np.testing.assert_allclose(twice.positions, once.positions, atol=1e-9)
    for f in range(s.n_frames):
        d_in = np.linalg.norm(s.positions[f][:, None] - s.positions[f][None], axis=-1)
        d_out = np.linalg.norm(once.positions[f][:, None] - once.positions[f][None], axis=-1)
        np.testing.assert_allclose(d_out, d_in, atol=1e-9)


# --------------------------------------------------------------- resample


def test_resample_same_rate_identity():
    s = head_sweep()
    out = resample(s, s.sample_rate)
    np.testing.assert_array_equal(out.positions, s.positions)


def test_resample_ramp_to_25hz_stays_on_ramp():
    n = 201
    t = np.arange(n) / 200.0
    pos = np.stack([3.0 * t, -2.0 * t + 1.0, 0.5 * t], axis=1)[:, None, :]
    out = resample(make_sweep(pos), 25.0)
    t_out = np.arange(out.n_frames) / 25.0
    expect = np.stack([3.0 * t_out, -2.0 * t_out + 1.0, 0.5 * t_out], axis=1)
    np.testing.assert_allclose(out.positions[:, 0], expect, atol=1e-12)
    assert out.n_frames == 26
    assert abs(out.span - make_sweep(pos).span) <= 1 / 25.0


def test_upsample_midpoint_is_mean():
    pos = np.array([[[0.0, 0.0, 0.0]], [[2.0, 4.0, -6.0]]])
    d = np.array([[[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]]])
    out = resample(make_sweep(pos, d, rate=10.0), 100.0)
    assert out.n_frames == 11
    np.testing.assert_allclose(out.positions[5, 0], [1.0, 2.0, -3.0], atol=1e-12)
    np.testing.assert_allclose(out.directions[5, 0], [math.sqrt(0.5), math.sqrt(0.5), 0.0], atol=1e-12)


@given(st.integers(0, 10**6), st.sampled_from([2, 4, 5, 8]))
def test_resample_there_and_back(seed, factor):
    rng = np.random.default_rng(seed)
    s = make_sweep(rng.normal(0, 10, (41, 2, 3)))
    back = resample(resample(s, 200.0 / factor), 200.0)
    idx = np.arange(0, s.n_frames, factor)
    np.testing.assert_allclose(back.positions[idx], s.positions[idx], atol=1e-6)


def test_resample_scales_annotations():
    s = make_sweep(np.zeros((201, 1, 3)), annotations=[Annotation("a", 40, 120)])
    out = resample(s, 100.0)
    assert out.annotations == (Annotation("a", 20, 60),)


# ------------------------------------------------------------------ clean


def test_clean_constant_is_fixed_point():
    s = make_sweep(np.ones((50, 2, 3)))
    out, events = clean(s)
    np.testing.assert_array_equal(out.positions, s.positions)
    assert events == []


def test_clean_replaces_spike():
    pos = np.zeros((40, 1, 3))
    pos[:, 0, 0] = np.arange(40) * 0.1
    pos[20, 0, 2] = 50.0
    out, events = clean(make_sweep(pos), max_speed=500.0)
    assert any(e.reason == "speed" and e.start_frame == 20 and e.end_frame == 21 for e in events)
    assert any(e.reason == "filled" and e.start_frame == 20 for e in events)
    np.testing.assert_allclose(out.positions[20, 0], [2.0, 0.0, 0.0], atol=1e-12)
    assert out.valid[20, 0]


def test_clean_reports_dead_coil():
    pos = np.zeros((10, 2, 3))
    valid = np.ones((10, 2), dtype=bool)
    valid[:, 1] = False
    pos[:, 1] = np.nan
    out, events = clean(make_sweep(pos, valid=valid))
    assert [(e.coil, e.reason) for e in events] == [("C1", "unrepairable")]
    assert not out.valid[:, 1].any()


def test_clean_leaves_long_gaps():
    pos = np.zeros((40, 1, 3))
    valid = np.ones((40, 1), dtype=bool)
    valid[10:25] = False
    pos[10:25] = np.nan
    out, events = clean(make_sweep(pos, valid=valid), median_window=7)
    assert ("unfilled", 10, 25) in [(e.reason, e.start_frame, e.end_frame) for e in events]
    assert not out.valid[10:25].any()


def test_clean_smooths_noise_but_not_smooth_motion():
    t = np.linspace(0, 1, 400)
    track = np.stack([10 * np.sin(2 * np.pi * t), 5 * t ** 2, np.cos(3 * t)], axis=1)[:, None]
    smooth, ev = clean(make_sweep(track))
    assert ev == []
    np.testing.assert_array_equal(smooth.positions, track)
    rng = np.random.default_rng(0)
    noisy = track + rng.normal(0, 0.3, track.shape)
    out, ev = clean(make_sweep(noisy))
    assert any(e.reason == "smoothed" for e in ev)
    err_in = np.abs(noisy - track).std()
    err_out = np.abs(out.positions - track).std()
    assert err_out < 0.6 * err_in


def test_noise_estimate_scale():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 0.5, (5000, 3))
    assert noise_sigma(x, np.ones(5000, dtype=bool)) == pytest.approx(0.5, rel=0.1)


@given(st.integers(0, 10**6))
def test_clean_only_touches_flagged_samples(seed):
    rng = np.random.default_rng(seed)
    n = 60
    pos = np.cumsum(rng.normal(0, 0.05, (n, 2, 3)), axis=0)
    spikes = rng.random((n, 2)) < 0.05
    pos[spikes] += rng.normal(0, 30, (spikes.sum(), 3))
    s = make_sweep(pos)
    out, events = clean(s, smooth_window=int(rng.choice([0, 9])))
    touched = np.zeros((n, 2), dtype=bool)
    for e in events:
        touched[e.start_frame:e.end_frame, s.coil_names.index(e.coil)] = True
    same = (out.positions == s.positions).all(-1) & (out.valid == s.valid)
    assert (same | touched).all()
    assert np.isfinite(out.positions[out.valid]).all()
