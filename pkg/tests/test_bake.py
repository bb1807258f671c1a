from __future__ import annotations

import json
import math

import numpy as np
import pytest

from conftest import random_pose
from ematongue.bake import (
    ExportError,
    bake,
    baked_frame_count,
    export_animation,
    export_obj_sequence,
    frame_filename,
    load_animation,
    max_vertex_step,
    write_animation,
)
from ematongue.nla import Action, segment_actions
from ematongue.rig import Pose, evaluate_pose
from ematongue.skin import auto_weights, deform, load_mesh
from ematongue.synth import tongue_mesh


@pytest.fixture(scope="module")
def mesh(rig):
    return tongue_mesh(rig)


@pytest.fixture(scope="module")
def weights(rig, mesh):
    return auto_weights(mesh, rig)


@pytest.fixture(scope="module")
def cycle(clean_corpus, clean_solve):
    return segment_actions(clean_solve, [clean_corpus.cleaned.annotations[2]], 200.0)[0]


def test_rest_bake_equals_bind_mesh(rig, mesh, weights):
    baked = bake(Action("rest", [Pose.rest(rig)], 200.0), rig, mesh, weights)
    assert len(baked) == 1
    np.testing.assert_allclose(baked.frames[0].vertices, mesh.vertices, atol=1e-9)


@pytest.mark.parametrize("n", [1, 7, 8, 9, 90, 2070])
def test_stride_frame_count(rig, mesh, weights, n):
    act = Action("a", [Pose.rest(rig)] * n, 200.0)
    if n > 100:
        assert baked_frame_count(n, 8) == math.ceil(n / 8)
        return
    baked = bake(act, rig, mesh, weights, stride=8)
    assert len(baked) == math.ceil(n / 8) == baked_frame_count(n, 8)
    assert baked.rate == 25.0
    assert [f.source_frame for f in baked.frames] == list(range(0, n, 8))


def test_bad_stride_and_rig(rig, mesh, weights):
    act = Action("a", [Pose.rest(rig)], 200.0)
    with pytest.raises(ValueError, match="stride"):
        bake(act, rig, mesh, weights, stride=0)
    from ematongue.rig import build_rig

    other = build_rig({"bones": [{"name": "a", "head": [0, 0, 0], "tail": [0, 1, 0]}]})
    with pytest.raises(ValueError, match="different rig"):
        bake(Action("o", [Pose.rest(other)], 200.0), rig, mesh, weights)
    with pytest.raises(ValueError, match="vertices"):
        bake(act, rig, tongue_mesh(rig, 6, 8), weights)


def test_cycle_bake_matches_direct_deform(rig, mesh, weights, cycle):
    baked = bake(cycle, rig, mesh, weights)
    for i in (0, 40, len(cycle) - 1):
        direct = deform(mesh, weights, evaluate_pose(cycle.frames[i])).vertices
        np.testing.assert_array_equal(baked.frames[i].vertices, direct)
    apex = mesh.landmarks["apex"]
    root_head = rig.rest_joints[0]
    root_v = int(np.argmin(np.linalg.norm(mesh.vertices - root_head, axis=1)))
    for j in (len(cycle) - 1, 40):
        disp = np.linalg.norm(baked.frames[j].vertices - baked.frames[0].vertices, axis=1)
        assert disp[apex] > 0
        assert disp[root_v] < 0.1 * disp[apex]


def test_baked_trajectories_are_continuous(rig, mesh, weights, cycle):
    for stride in (1, 8):
        baked = bake(cycle, rig, mesh, weights, stride=stride)
        assert max_vertex_step(baked) < 1000.0 * stride / 200.0


def test_three_frame_export(tmp_path, rig, mesh, weights):
    rng = np.random.default_rng(0)
    act = Action("a", [random_pose(rig, rng) for _ in range(3)], 200.0)
    baked = bake(act, rig, mesh, weights)
    paths = export_obj_sequence(baked, tmp_path / "obj")
    write_animation(baked, tmp_path / "anim.json")
    assert [p.name for p in paths] == ["frame_000001.obj", "frame_000002.obj", "frame_000003.obj"]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["anim.json", "obj"]
    back = load_mesh(paths[1].read_text())
    np.testing.assert_allclose(back.vertices, baked.frames[1].vertices, atol=1e-6)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)


def test_animation_round_trip(rig, mesh, weights):
    rng = np.random.default_rng(1)
    act = Action("a", [random_pose(rig, rng) for _ in range(5)], 200.0)
    baked = bake(act, rig, mesh, weights)
    anim = load_animation(export_animation(baked))
    assert len(anim) == 5 and anim.rate == 200.0
    for i in range(5):
        np.testing.assert_allclose(anim.skin(i), baked.frames[i].vertices, atol=1e-6)


def test_quaternions_are_unit(rig, mesh, weights, cycle):
    doc = json.loads(export_animation(bake(cycle, rig, mesh, weights, stride=10)))
    assert doc["format_version"] == 1
    q = np.array([[rec[3:7] for rec in f["transforms"]] for f in doc["frames"]])
    assert np.abs(np.linalg.norm(q, axis=-1) - 1.0).max() <= 1e-9
    rest_q = np.array(doc["rest"])[:, 3:7]
    assert np.abs(np.linalg.norm(rest_q, axis=-1) - 1.0).max() <= 1e-9


def test_animation_rejects_bad_quaternion(rig, mesh, weights):
    doc = json.loads(export_animation(bake(Action("a", [Pose.rest(rig)], 200.0), rig, mesh, weights)))
    doc["frames"][0]["transforms"][0][3] = 2.0
    with pytest.raises(ValueError, match="quaternion"):
        load_animation(json.dumps(doc))
    doc["format_version"] = 9
    with pytest.raises(ValueError, match="format_version"):
        load_animation(json.dumps(doc))


def test_export_errors_name_path(tmp_path, rig, mesh, weights):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    baked = bake(Action("a", [Pose.rest(rig)], 200.0), rig, mesh, weights)
    with pytest.raises(ExportError, match="file"):
        export_obj_sequence(baked, blocker / "sub")


def test_frame_filename():
    assert frame_filename(0) == "frame_000001.obj"
    assert frame_filename(123455) == "frame_123456.obj"
