"""Bake actions into per-frame meshes and a self-contained animation JSON.

Animation JSON (``format_version`` 1)::

    rig        rig document (bones with rest geometry)
    rate       baked frame rate in Hz (source rate / stride)
    segments   [[bone, index], ...] with matching ``rest`` records
               ``[ox, oy, oz, qw, qx, qy, qz]`` (rest origin and rest rotation)
    mesh       {"vertices": [...], "triangles": [...]} in rest space
    weights    weight map (segment indices refer to ``segments``)
    frames     [{"source_frame": i, "transforms": [[tx, ty, tz, qw, qx, qy, qz,
               axial, cross], ...]}, ...]

A record maps rest space to posed space as
``x -> R diag(cross, axial, cross) R_rest^T (x - o_rest) + t``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .geometry import matrix_to_quat, quat_to_matrix
from .nla import Action
from .rig import Rig, SegmentTransform, build_rig, evaluate_pose
from .skin import Mesh, WeightMap, deform_points, save_mesh, segment_affines

ANIMATION_FORMAT_VERSION = 1


class ExportError(OSError):
    pass


@dataclass(eq=False)
class BakedFrame:
    source_frame: int
    segments: list[SegmentTransform]
    vertices: np.ndarray


@dataclass(eq=False)
class BakedSequence:
    rig: Rig
    mesh: Mesh
    weights: WeightMap
    rate: float
    stride: int
    frames: list[BakedFrame]

    def __len__(self) -> int:
        return len(self.frames)

    def mesh_at(self, i: int) -> Mesh:
        return self.mesh.with_vertices(self.frames[i].vertices)


def check_binding(rig: Rig, mesh: Mesh, weights: WeightMap) -> None:
    if len(weights.indices) != len(mesh.vertices):
        raise ValueError(f"weight map covers {len(weights.indices)} vertices, mesh has {len(mesh.vertices)}")
    known = set(rig.segment_keys())
    used = {weights.segment_keys[i] for i in np.unique(weights.indices)}
    missing = sorted(used - known)
    if missing:
        raise ValueError(f"weights reference segments missing from the rig: {missing[:3]}")


def bake(action: Action, rig: Rig, mesh: Mesh, weights: WeightMap, stride: int = 1) -> BakedSequence:
    """Evaluate and skin every ``stride``-th frame of ``action``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if action.rig is not rig and action.rig.fingerprint != rig.fingerprint:
        raise ValueError("action was solved for a different rig")
    check_binding(rig, mesh, weights)
    frames = []
    for i in range(0, len(action), stride):
        segs = evaluate_pose(action.frames[i])
        mats, offs = segment_affines(weights, segs)
        frames.append(BakedFrame(i, segs, deform_points(mesh.vertices, weights, mats, offs)))
    return BakedSequence(rig, mesh, weights, action.rate / stride, stride, frames)


def frame_filename(i: int) -> str:
    """1-based, zero padded: ``frame_000001.obj``."""
    return f"frame_{i + 1:06d}.obj"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ExportError(f"{path}: {exc.strerror or exc}") from exc


def export_obj_sequence(baked: BakedSequence, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    paths = []
    for i in range(len(baked)):
        p = directory / frame_filename(i)
        _write(p, save_mesh(baked.mesh_at(i)))
        paths.append(p)
    return paths


def _segment_record(seg: SegmentTransform) -> list[float]:
    q = matrix_to_quat(seg.rotation)
    return [float(v) for v in seg.origin] + [float(v) for v in q] + [float(seg.scale_axial), float(seg.scale_cross)]


def animation_doc(baked: BakedSequence) -> dict[str, Any]:
    keys = baked.weights.segment_keys
    rest_by_key = {(s.bone, s.index): s for s in baked.frames[0].segments} if baked.frames else {}
    rest = []
    for k in keys:
        s = rest_by_key[k]
        rest.append([float(v) for v in s.rest_origin] + [float(v) for v in matrix_to_quat(s.rest_rotation)])
    frames = []
    for fr in baked.frames:
        by_key = {(s.bone, s.index): s for s in fr.segments}
        frames.append({"source_frame": fr.source_frame, "transforms": [_segment_record(by_key[k]) for k in keys]})
    return {
        "format_version": ANIMATION_FORMAT_VERSION,
        "rate": baked.rate,
        "stride": baked.stride,
        "rig": baked.rig.to_dict(),
        "segments": [[b, i] for b, i in keys],
        "rest": rest,
        "mesh": {"vertices": baked.mesh.vertices.tolist(), "triangles": baked.mesh.triangles.tolist(),
                 "landmarks": baked.mesh.landmarks},
        "weights": {"indices": baked.weights.indices.tolist(), "weights": baked.weights.weights.tolist()},
        "frames": frames,
    }


def export_animation(baked: BakedSequence) -> str:
    return json.dumps(animation_doc(baked), separators=(",", ":")) + "\n"


def write_animation(baked: BakedSequence, path: str | Path) -> Path:
    path = Path(path)
    _write(path, export_animation(baked))
    return path


@dataclass(eq=False)
class Animation:
    """Re-imported animation JSON with enough state to re-skin every frame."""

    rig: Rig
    rate: float
    stride: int
    mesh: Mesh
    weights: WeightMap
    rest: np.ndarray  # (S, 7)
    transforms: np.ndarray  # (F, S, 9)
    source_frames: list[int]

    def __len__(self) -> int:
        return len(self.transforms)

    def affines(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s = len(self.rest)
        mats = np.empty((s, 3, 3))
        offs = np.empty((s, 3))
        for j in range(s):
            rec = self.transforms[i, j]
            r = quat_to_matrix(rec[3:7])
            r0 = quat_to_matrix(self.rest[j, 3:7])
            a = (r * np.array([rec[8], rec[7], rec[8]])) @ r0.T
            mats[j] = a
            offs[j] = rec[:3] - a @ self.rest[j, :3]
        return mats, offs

    def skin(self, i: int) -> np.ndarray:
        mats, offs = self.affines(i)
        return deform_points(self.mesh.vertices, self.weights, mats, offs)


def load_animation(text: str) -> Animation:
    doc = json.loads(text)
    if doc.get("format_version") != ANIMATION_FORMAT_VERSION:
        raise ValueError(f"unsupported animation format_version {doc.get('format_version')!r}")
    keys = [(str(b), int(i)) for b, i in doc["segments"]]
    m = doc["mesh"]
    mesh = Mesh(np.asarray(m["vertices"], dtype=float), np.asarray(m["triangles"], dtype=np.int64),
                {k: int(v) for k, v in m.get("landmarks", {}).items()})
    w = doc["weights"]
    weights = WeightMap(keys, np.asarray(w["indices"], dtype=np.int64), np.asarray(w["weights"], dtype=float))
    transforms = np.asarray([f["transforms"] for f in doc["frames"]], dtype=float).reshape(-1, len(keys), 9)
    q = transforms[..., 3:7]
    if len(q) and np.abs(np.linalg.norm(q, axis=-1) - 1.0).max() > 1e-9:
        raise ValueError("non-unit quaternion in animation")
    return Animation(build_rig(doc["rig"]), float(doc["rate"]), int(doc["stride"]), mesh, weights,
                     np.asarray(doc["rest"], dtype=float).reshape(-1, 7), transforms,
                     [int(f["source_frame"]) for f in doc["frames"]])


def max_vertex_step(baked: BakedSequence) -> float:
    """Largest per-vertex displacement between consecutive baked frames (mm)."""
    best = 0.0
    for a, b in zip(baked.frames, baked.frames[1:]):
        best = max(best, float(np.linalg.norm(b.vertices - a.vertices, axis=1).max()))
    return best


def baked_frame_count(n_frames: int, stride: int) -> int:
    return math.ceil(n_frames / stride)
