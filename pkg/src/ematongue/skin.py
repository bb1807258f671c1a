"""Tongue surface mesh: OBJ I/O, landmark registration, weights and skinning.

OBJ subset: ``v x y z`` and ``f a b c ...`` records (1-based or negative
indices, ``a/b/c`` forms accepted, ``vt``/``vn`` ignored).  Polygons are fan
triangulated.  Named landmarks travel in comment lines ``#landmark NAME INDEX``
with a 0-based vertex index.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .ema_io import ParseError
from .geometry import umeyama
from .rig import Rig, SegmentTransform

WELD_TOL = 1e-6
AREA_TOL = 1e-12


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int
    landmarks: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.vertices) < 3:
            raise ValueError("mesh needs at least 3 vertices")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        for name, i in self.landmarks.items():
            if not 0 <= i < len(self.vertices):
                raise ValueError(f"landmark {name!r} index {i} out of range")

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.triangles.copy(), dict(self.landmarks))


def _obj_index(tok: str, n: int, lineno: int) -> int:
    try:
        i = int(tok.split("/")[0])
    except ValueError:
        raise ParseError(f"bad face index {tok!r}", lineno) from None
    if i == 0:
        raise ParseError("face index 0 is invalid (OBJ indices are 1-based)", lineno)
    k = i - 1 if i > 0 else n + i
    if not 0 <= k < n:
        raise ParseError(f"face index {i} out of range (have {n} vertices)", lineno)
    return k


def load_mesh(text: str, cleanup: bool = True) -> Mesh:
    verts: list[list[float]] = []
    tris: list[tuple[int, int, int]] = []
    marks: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#landmark"):
            parts = s.split()
            if len(parts) != 3:
                raise ParseError("expected '#landmark NAME INDEX'", lineno)
            marks[parts[1]] = int(parts[2])
            continue
        if s.startswith("#"):
            continue
        tag, *rest = s.split()
        if tag == "v":
            if len(rest) < 3:
                raise ParseError("vertex needs 3 coordinates", lineno)
            try:
                verts.append([float(x) for x in rest[:3]])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
        elif tag == "f":
            if len(rest) < 3:
                raise ParseError("face needs at least 3 vertices", lineno)
            idx = [_obj_index(t, len(verts), lineno) for t in rest]
            for k in range(1, len(idx) - 1):
                tris.append((idx[0], idx[k], idx[k + 1]))
        elif tag in ("vt", "vn", "o", "g", "s", "usemtl", "mtllib", "l"):
            continue
        else:
            raise ParseError(f"unsupported record {tag!r}", lineno)
    if len(verts) < 3:
        raise ParseError("mesh needs at least 3 vertices")
    for name, i in marks.items():
        if not 0 <= i < len(verts):
            raise ParseError(f"landmark {name!r} index {i} out of range")
    mesh = Mesh(np.array(verts), np.array(tris, dtype=np.int64).reshape(-1, 3), marks)
    return cleanup_mesh(mesh) if cleanup else mesh


def cleanup_mesh(mesh: Mesh) -> Mesh:
    """Weld vertices closer than 1e-6 mm and drop zero-area triangles."""
    v = mesh.vertices
    remap = np.arange(len(v))
    pairs = cKDTree(v).query_pairs(WELD_TOL, output_type="ndarray")
    if len(pairs):
        parent = np.arange(len(v))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for a, b in pairs:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        roots = np.array([find(i) for i in range(len(v))])
        keep = np.unique(roots)
        new_index = np.full(len(v), -1)
        new_index[keep] = np.arange(len(keep))
        remap = new_index[roots]
        v = v[keep]
    tris = remap[mesh.triangles] if len(mesh.triangles) else mesh.triangles
    if len(tris):
        e1 = v[tris[:, 1]] - v[tris[:, 0]]
        e2 = v[tris[:, 2]] - v[tris[:, 0]]
        area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
        tris = tris[area > AREA_TOL]
    marks = {k: int(remap[i]) for k, i in mesh.landmarks.items()}
    return Mesh(v, tris, marks)


def save_mesh(mesh: Mesh) -> str:
    out = []
    for name, i in sorted(mesh.landmarks.items()):
        out.append(f"#landmark {name} {i}")
    for x, y, z in mesh.vertices.tolist():
        out.append(f"v {x!r} {y!r} {z!r}")
    for a, b, c in (mesh.triangles + 1).tolist():
        out.append(f"f {a} {b} {c}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- registration


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation must be proper (det = +1)")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"scale": self.scale, "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimilarityTransform":
        return cls(float(d["scale"]), np.asarray(d["rotation"], dtype=float), np.asarray(d["translation"], dtype=float))


def register_landmarks(source: Sequence, target: Sequence,
                       allow_scale: bool = True) -> tuple[SimilarityTransform, float]:
    """Least-squares similarity (rigid if ``allow_scale`` is false) plus RMS residual."""
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    s, r, t = umeyama(src, dst, with_scale=allow_scale)
    xf = SimilarityTransform(s, r, t)
    rms = float(np.sqrt(((xf.apply(src) - dst) ** 2).sum(axis=1).mean()))
    return xf, rms


def register_mesh(mesh: Mesh, targets: Mapping[str, Sequence[float]], allow_scale: bool = True
                  ) -> tuple[Mesh, SimilarityTransform, float]:
    """Align a mesh onto EMA space using landmarks shared by name."""
    names = sorted(set(mesh.landmarks) & set(targets))
    if len(names) < 3:
        raise ValueError(f"need 3 shared landmarks, found {names}")
    src = mesh.vertices[[mesh.landmarks[n] for n in names]]
    dst = np.array([targets[n] for n in names], dtype=float)
    xf, rms = register_landmarks(src, dst, allow_scale)
    return mesh.with_vertices(xf.apply(mesh.vertices)), xf, rms


# --------------------------------------------------------------------- weights


@dataclass(eq=False)
class WeightMap:
    segment_keys: list[tuple[str, int]]
    indices: np.ndarray  # (V, K) into segment_keys
    weights: np.ndarray  # (V, K)

    def __post_init__(self):
        if self.indices.shape != self.weights.shape:
            raise ValueError("index and weight arrays disagree")
        if (self.weights < 0).any():
            raise ValueError("negative weight")
        if len(self.weights) and np.abs(self.weights.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("weights must sum to 1 per vertex")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= len(self.segment_keys)):
            raise ValueError("weight references a missing segment")

    def to_dict(self) -> dict:
        return {
            "segments": [[b, k] for b, k in self.segment_keys],
            "indices": self.indices.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "WeightMap":
        keys = [(str(b), int(k)) for b, k in d["segments"]]
        return cls(keys, np.asarray(d["indices"], dtype=np.int64), np.asarray(d["weights"], dtype=float))


def rest_segments(rig: Rig) -> tuple[np.ndarray, np.ndarray]:
    """Start and end points of every rest-pose segment, in rig segment order."""
    starts, ends = [], []
    for b, bb in enumerate(rig.bones):
        head = rig.rest_joints[rig.head_joint[b]]
        step = (bb.rest_tail - bb.rest_head) / bb.segments
        k = np.arange(bb.segments)[:, None]
        starts.append(head + k * step)
        ends.append(head + (k + 1) * step)
    return np.vstack(starts), np.vstack(ends)


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances ``(V, S)`` from points to line segments ``a[s]-b[s]``."""
    ab = b - a
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("vsk,sk->vs", ap, ab) / np.einsum("sk,sk->s", ab, ab), 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def auto_weights(mesh: Mesh, rig: Rig, power: float = 2.0, max_influences: int = 4,
                 epsilon: float = 0.5) -> WeightMap:
    """Inverse-distance weights to rest-pose bone segments.

    Raw weight ``1 / (d + epsilon) ** power``; the ``max_influences``
    largest are kept and normalised.
    """
    a, b = rest_segments(rig)
    dist = point_segment_distance(mesh.vertices, a, b)
    raw = 1.0 / (dist + epsilon) ** power
    k = min(max_influences, raw.shape[1])
    # stable sort keeps ties in segment order, so results are deterministic
    order = np.argsort(-raw, axis=1, kind="stable")[:, :k]
    w = np.take_along_axis(raw, order, axis=1)
    w /= w.sum(axis=1, keepdims=True)
    return WeightMap(rig.segment_keys(), order.astype(np.int64), w)


# -------------------------------------------------------------------- skinning


def segment_affines(weights: WeightMap, segments: Sequence[SegmentTransform]) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-segment affine maps in the weight map's segment order."""
    by_key = {(s.bone, s.index): s for s in segments}
    mats = np.empty((len(weights.segment_keys), 3, 3))
    offs = np.empty((len(weights.segment_keys), 3))
    used = np.zeros(len(weights.segment_keys), dtype=bool)
    used[np.unique(weights.indices)] = True
    for i, key in enumerate(weights.segment_keys):
        seg = by_key.get(key)
        if seg is None:
            if used[i]:
                raise KeyError(f"missing segment {key[0]}[{key[1]}]")
            mats[i], offs[i] = np.eye(3), 0.0
            continue
        mats[i], offs[i] = seg.affine()
    return mats, offs


def deform_points(points: np.ndarray, weights: WeightMap, mats: np.ndarray, offs: np.ndarray) -> np.ndarray:
    idx, w = weights.indices, weights.weights
    moved = np.einsum("vkij,vj->vki", mats[idx], points) + offs[idx]
    return np.einsum("vk,vki->vi", w, moved)


def deform(mesh: Mesh, weights: WeightMap, segments: Sequence[SegmentTransform]) -> Mesh:
    """Linear blend skinning of a rest-space mesh."""
    if len(weights.indices) != len(mesh.vertices):
        raise ValueError("weight map and mesh vertex counts differ")
    mats, offs = segment_affines(weights, segments)
    return mesh.with_vertices(deform_points(mesh.vertices, weights, mats, offs))


def weight_heatmap(weights: WeightMap, bone: str) -> np.ndarray:
    """Per-vertex total influence of one bone, in [0, 1]."""
    mask = np.array([b == bone for b, _ in weights.segment_keys])
    if not mask.any():
        raise KeyError(f"unknown bone {bone!r}")
    # summing normalised weights can overshoot 1 by an ulp
    return np.minimum(np.where(mask[weights.indices], weights.weights, 0.0).sum(axis=1), 1.0)


def format_heatmap(values: np.ndarray) -> str:
    lines = ["vertex_index,value"] + [f"{i},{float(v)!r}" for i, v in enumerate(values)]
    return "\n".join(lines) + "\n"


def load_landmarks(text: str) -> dict[str, np.ndarray]:
    doc = json.loads(text)
    return {str(k): np.asarray(v, dtype=float) for k, v in doc.items()}
