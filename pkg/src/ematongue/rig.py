"""Deformable-bone rig, strut adaptation layer and B-bone evaluation.

Joint indexing: joint 0 is the root bone's head and joint ``b + 1`` is the
tail of bone ``b``.  Bones are kept in topological order, so a child's head
joint is always its parent's tail joint and chain connectivity holds by
construction for every :class:`Pose`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .geometry import axis_angle_matrix, coil_frame, rest_frame, swing_apply, swing_matrix

CONNECT_TOL = 1e-6
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(6)


class RigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BBone:
    name: str
    parent: str | None
    rest_head: np.ndarray
    rest_tail: np.ndarray
    rest_roll: float = 0.0
    segments: int = 8
    ease_in: float = 1.0
    ease_out: float = 1.0
    rest_radius: float = 4.0

    @property
    def rest_length(self) -> float:
        return float(np.linalg.norm(self.rest_tail - self.rest_head))

    @property
    def rest_direction(self) -> np.ndarray:
        return (self.rest_tail - self.rest_head) / self.rest_length

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "parent": self.parent,
            "head": [float(v) for v in self.rest_head],
            "tail": [float(v) for v in self.rest_tail],
            "roll": self.rest_roll,
            "segments": self.segments,
            "ease_in": self.ease_in,
            "ease_out": self.ease_out,
            "radius": self.rest_radius,
        }


class Rig:
    """Validated, immutable bone forest with exactly one root."""

    def __init__(self, bones: Sequence[BBone]):
        self.bones: tuple[BBone, ...] = tuple(_toposort(bones))
        self.index = {b.name: i for i, b in enumerate(self.bones)}
        self.parent_index = np.array([self.index[b.parent] if b.parent else -1 for b in self.bones])
        self.head_joint = np.array([0 if p < 0 else p + 1 for p in self.parent_index])
        self.tail_joint = np.arange(1, len(self.bones) + 1)
        self.rest_joints = np.vstack([self.bones[0].rest_head] + [b.rest_tail for b in self.bones])
        self.rest_lengths = np.array([b.rest_length for b in self.bones])
        self.rest_dirs = np.array([b.rest_direction for b in self.bones])
        self.rest_frames = np.array([rest_frame(b.rest_direction, b.rest_roll) for b in self.bones])
        # incidence[j] lists bones whose chord enters the averaged direction at joint j
        inc: list[list[int]] = [[] for _ in range(len(self.bones) + 1)]
        for b in range(len(self.bones)):
            inc[self.head_joint[b]].append(b)
            inc[self.tail_joint[b]].append(b)
        self.incidence = tuple(tuple(sorted(i)) for i in inc)
        self.incidence_matrix = np.zeros((len(inc), len(self.bones)))
        for j, bs in enumerate(self.incidence):
            self.incidence_matrix[j, list(bs)] = 1.0
        self.rest_joint_dirs = joint_directions(self, self.rest_joints)
        self.segment_offsets = np.concatenate([[0], np.cumsum([b.segments for b in self.bones])])

    def __len__(self) -> int:
        return len(self.bones)

    def bone(self, name: str) -> BBone:
        try:
            return self.bones[self.index[name]]
        except KeyError:
            raise KeyError(f"unknown bone {name!r}") from None

    def children(self, name: str) -> list[str]:
        return [b.name for b in self.bones if b.parent == name]

    @property
    def n_segments(self) -> int:
        return int(self.segment_offsets[-1])

    def segment_keys(self) -> list[tuple[str, int]]:
        return [(b.name, k) for b in self.bones for k in range(b.segments)]

    def endpoint_joint(self, bone: str, end: str) -> int:
        b = self.index[bone]
        if end == "head":
            return int(self.head_joint[b])
        if end == "tail":
            return int(self.tail_joint[b])
        raise RigError(f"end must be 'head' or 'tail', got {end!r}")

    def topology(self) -> dict:
        """Root name, side-chain count and chain summary.

        ``branch_points`` counts chains that leave an existing chain, i.e. the
        sum over bones of ``max(0, children - 1)``.
        """
        kids = {b.name: self.children(b.name) for b in self.bones}
        return {
            "root": self.bones[0].name,
            "roots": [b.name for b in self.bones if b.parent is None],
            "branch_points": sum(max(0, len(k) - 1) for k in kids.values()),
            "forks": [n for n, k in kids.items() if len(k) > 1],
            "leaves": [n for n, k in kids.items() if not k],
        }

    def to_dict(self) -> dict:
        return {"format_version": 1, "bones": [b.to_dict() for b in self.bones]}

    @cached_property
    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _toposort(bones: Sequence[BBone]) -> list[BBone]:
    names = [b.name for b in bones]
    if not bones:
        raise RigError("rig has no bones")
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise RigError(f"duplicate bone name(s) {dup}")
    by_name = {b.name: b for b in bones}
    for b in bones:
        if not (np.isfinite(b.rest_head).all() and np.isfinite(b.rest_tail).all()):
            raise RigError(f"bone {b.name!r}: non-finite rest geometry")
        if b.rest_length <= 0.0:
            raise RigError(f"bone {b.name!r} has zero length")
        if b.segments < 1 or int(b.segments) != b.segments:
            raise RigError(f"bone {b.name!r}: segments must be an integer >= 1")
        if b.rest_radius <= 0.0:
            raise RigError(f"bone {b.name!r}: rest_radius must be positive")
        if b.ease_in < 0.0 or b.ease_out < 0.0:
            raise RigError(f"bone {b.name!r}: ease must be >= 0")
        if b.parent is not None and b.parent not in by_name:
            raise RigError(f"bone {b.name!r}: unknown parent {b.parent!r}")
    # cycle check by walking parent pointers
    for b in bones:
        seen = {b.name}
        p = b.parent
        while p is not None:
            if p in seen:
                raise RigError(f"cycle through bone {b.name!r}")
            seen.add(p)
            p = by_name[p].parent
    roots = [b for b in bones if b.parent is None]
    if len(roots) != 1:
        raise RigError(f"rig must have exactly one root, found {len(roots)} (disconnected bones)")
    for b in bones:
        if b.parent is not None:
            gap = np.linalg.norm(b.rest_head - by_name[b.parent].rest_tail)
            if gap > CONNECT_TOL:
                raise RigError(f"bone {b.name!r} is disconnected from parent {b.parent!r} ({gap:.3g} mm)")
    order: list[BBone] = []
    frontier = roots
    while frontier:
        order.extend(frontier)
        nxt = []
        for f in frontier:
            nxt.extend(b for b in bones if b.parent == f.name)
        frontier = nxt
    return order


def build_rig(doc: Mapping[str, Any] | str) -> Rig:
    """Build a :class:`Rig` from a rig description (dict or JSON text).

    A child bone may omit ``head``; it then starts at its parent's tail.
    """
    if isinstance(doc, str):
        doc = json.loads(doc)
    try:
        entries = doc["bones"]
    except (KeyError, TypeError):
        raise RigError("rig document needs a 'bones' list") from None
    tails: dict[str, np.ndarray] = {}
    raw = {}
    for e in entries:
        raw[e["name"]] = e
    bones = []
    for e in entries:
        try:
            name = str(e["name"])
            parent = e.get("parent")
            tail = np.asarray(e["tail"], dtype=float)
            if "head" in e:
                head = np.asarray(e["head"], dtype=float)
            elif parent is not None and parent in raw:
                head = np.asarray(raw[parent]["tail"], dtype=float)
            else:
                raise RigError(f"bone {name!r} needs a head")
            bones.append(
                BBone(
                    name=name,
                    parent=parent,
                    rest_head=head,
                    rest_tail=tail,
                    rest_roll=float(e.get("roll", 0.0)),
                    segments=int(e.get("segments", 8)),
                    ease_in=float(e.get("ease_in", 1.0)),
                    ease_out=float(e.get("ease_out", 1.0)),
                    rest_radius=float(e.get("radius", 4.0)),
                )
            )
        except KeyError as exc:
            raise RigError(f"bone entry missing field {exc}") from None
        tails[name] = tail
    return Rig(bones)


def load_data(name: str) -> Any:
    return json.loads(resources.files("ematongue.data").joinpath(name).read_text())


def default_rig() -> Rig:
    """Four-bone spine rooted at the tongue back plus two lateral two-bone chains."""
    return build_rig(load_data("default_rig.json"))


def default_assignment() -> dict[str, tuple[str, str]]:
    return {k: (v[0], v[1]) for k, v in load_data("default_assignment.json").items()}


# ------------------------------------------------------------------------ pose


@dataclass(eq=False)
class Pose:
    """Solved rig state for one frame.

    ``joints`` holds the shared endpoint positions (see module docstring);
    per-bone head/tail positions and stretch are derived views.
    """

    rig: Rig
    joints: np.ndarray
    head_twist: np.ndarray
    tail_twist: np.ndarray
    residual: float = 0.0
    iterations: int = 0
    converged: bool = True

    @classmethod
    def rest(cls, rig: Rig) -> "Pose":
        n = len(rig)
        return cls(rig, rig.rest_joints.copy(), np.zeros(n), np.zeros(n))

    @property
    def heads(self) -> np.ndarray:
        return self.joints[self.rig.head_joint]

    @property
    def tails(self) -> np.ndarray:
        return self.joints[self.rig.tail_joint]

    @property
    def stretch(self) -> np.ndarray:
        return np.linalg.norm(self.tails - self.heads, axis=1) / self.rig.rest_lengths

    def head_pos(self, bone: str) -> np.ndarray:
        return self.joints[self.rig.head_joint[self.rig.index[bone]]]

    def tail_pos(self, bone: str) -> np.ndarray:
        return self.joints[self.rig.tail_joint[self.rig.index[bone]]]

    def endpoint(self, bone: str, end: str) -> np.ndarray:
        return self.joints[self.rig.endpoint_joint(bone, end)]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.joints).all() and np.isfinite(self.head_twist).all()
                    and np.isfinite(self.tail_twist).all())

    def copy(self) -> "Pose":
        return Pose(self.rig, self.joints.copy(), self.head_twist.copy(), self.tail_twist.copy(),
                    self.residual, self.iterations, self.converged)

    def transformed(self, rot: np.ndarray, trans: np.ndarray) -> "Pose":
        return Pose(self.rig, self.joints @ rot.T + trans, self.head_twist.copy(), self.tail_twist.copy())


def joint_directions(rig: Rig, joints: np.ndarray) -> np.ndarray:
    """Unit average of the incident bone chords at every joint."""
    chords = joints[rig.tail_joint] - joints[rig.head_joint]
    units = chords / np.linalg.norm(chords, axis=1, keepdims=True)
    s = rig.incidence_matrix @ units
    return s / np.linalg.norm(s, axis=1, keepdims=True)


def end_tangents(rig: Rig, joints: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit tangent directions at every bone's head and tail.

    Each joint carries the minimal rotation from its rest averaged direction
    to its current one; a bone end's tangent is the bone's rest direction
    carried by that rotation.
    """
    d = joint_directions(rig, joints)
    d0 = rig.rest_joint_dirs
    heads = np.empty((len(rig), 3))
    tails = np.empty((len(rig), 3))
    for b in range(len(rig)):
        u0 = rig.rest_dirs[b]
        jh, jt = rig.head_joint[b], rig.tail_joint[b]
        heads[b] = swing_apply(d0[jh], d[jh], u0)
        tails[b] = swing_apply(d0[jt], d[jt], u0)
    return heads, tails


# --------------------------------------------------------------- B-bone curve


@dataclass(frozen=True, eq=False)
class SegmentTransform:
    bone: str
    index: int
    origin: np.ndarray
    rotation: np.ndarray
    scale_axial: float
    scale_cross: float
    rest_origin: np.ndarray
    rest_rotation: np.ndarray

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """``(A, b)`` with ``x -> A @ x + b`` mapping rest space to posed space."""
        scales = np.array([self.scale_cross, self.scale_axial, self.scale_cross])
        a = (self.rotation * scales) @ self.rest_rotation.T
        return a, self.origin - a @ self.rest_origin

    def transformed(self, rot: np.ndarray, trans: np.ndarray) -> "SegmentTransform":
        return SegmentTransform(self.bone, self.index, rot @ self.origin + trans, rot @ self.rotation,
                                self.scale_axial, self.scale_cross, self.rest_origin, self.rest_rotation)


def hermite(p0, m0, p1, m1, t):
    """Cubic Hermite points at parameters ``t`` (shape ``(n,)``)."""
    t = np.asarray(t, dtype=float)[:, None]
    t2, t3 = t * t, t * t * t
    return (2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + t) * m0 + (-2 * t3 + 3 * t2) * p1 + (t3 - t2) * m1


def hermite_derivative(p0, m0, p1, m1, t):
    t = np.asarray(t, dtype=float)[:, None]
    t2 = t * t
    return (6 * t2 - 6 * t) * p0 + (3 * t2 - 4 * t + 1) * m0 + (6 * t - 6 * t2) * p1 + (3 * t2 - 2 * t) * m1


@dataclass(frozen=True, eq=False)
class BoneCurve:
    """Hermite control data of one posed bone."""

    head: np.ndarray
    tail: np.ndarray
    head_tangent: np.ndarray  # unit
    tail_tangent: np.ndarray  # unit
    m0: np.ndarray
    m1: np.ndarray

    def points(self, t) -> np.ndarray:
        return hermite(self.head, self.m0, self.tail, self.m1, t)

    def derivative(self, t) -> np.ndarray:
        return hermite_derivative(self.head, self.m0, self.tail, self.m1, t)

    def arc_length(self, a: float, b: float) -> float:
        x = 0.5 * (b - a) * _GL_NODES + 0.5 * (a + b)
        speed = np.linalg.norm(self.derivative(x), axis=1)
        return float(0.5 * (b - a) * (_GL_WEIGHTS @ speed))


def bone_curve(bone: BBone | str, pose: Pose, tangents: tuple[np.ndarray, np.ndarray] | None = None) -> BoneCurve:
    """Hermite curve of one bone; handle lengths scale with the current chord."""
    rig = pose.rig
    b = rig.index[bone if isinstance(bone, str) else bone.name]
    bb = rig.bones[b]
    head = pose.joints[rig.head_joint[b]]
    tail = pose.joints[rig.tail_joint[b]]
    length = float(np.linalg.norm(tail - head))
    if length < 1e-9:
        raise RigError(f"collapsed bone {bb.name!r}")
    th, tt = tangents if tangents is not None else end_tangents(rig, pose.joints)
    return BoneCurve(head, tail, th[b], tt[b], th[b] * length * bb.ease_in, tt[b] * length * bb.ease_out)


def evaluate_bbone(bone: BBone | str, pose: Pose,
                   tangents: tuple[np.ndarray, np.ndarray] | None = None) -> list[SegmentTransform]:
    """Discretise a posed B-bone into per-segment transforms.

    Segment ``k`` starts at curve parameter ``k/S``; its rotation is the
    parallel-transported rest frame at the segment midpoint, twisted about the
    tangent by the head-to-tail linear twist ramp.  ``scale_axial`` is the
    segment's arc length over its rest length and ``scale_cross`` is
    ``1/sqrt(stretch)``, which keeps bone volume constant.
    """
    rig = pose.rig
    b = rig.index[bone if isinstance(bone, str) else bone.name]
    bb = rig.bones[b]
    if tangents is None:
        chords = np.linalg.norm(pose.tails - pose.heads, axis=1)
        if chords.min() < 1e-9:
            raise RigError(f"collapsed bone {rig.bones[int(chords.argmin())].name!r}")
        tangents = end_tangents(rig, pose.joints)
    curve = bone_curve(bb, pose, tangents)
    n = bb.segments
    starts = np.arange(n) / n
    mids = (np.arange(n) + 0.5) / n
    origins = curve.points(starts)
    origins[0] = curve.head
    mid_tangents = curve.derivative(mids)
    mid_tangents /= np.linalg.norm(mid_tangents, axis=1, keepdims=True)

    stretch = float(np.linalg.norm(curve.tail - curve.head)) / bb.rest_length
    cross = 1.0 / np.sqrt(stretch)
    rest_r = rig.rest_frames[b]
    rest_head = rig.rest_joints[rig.head_joint[b]]
    u0 = rig.rest_dirs[b]
    seg_rest = bb.rest_length / n

    frame = swing_matrix(u0, curve.head_tangent) @ rest_r
    prev_t = curve.head_tangent
    twist0 = float(pose.head_twist[b])
    dtwist = float(pose.tail_twist[b]) - twist0
    out = []
    for k in range(n):
        t_k = mid_tangents[k]
        frame = swing_matrix(prev_t, t_k) @ frame
        prev_t = t_k
        rot = axis_angle_matrix(t_k, twist0 + dtwist * mids[k]) @ frame
        axial = curve.arc_length(starts[k], (k + 1) / n) / seg_rest
        out.append(
            SegmentTransform(
                bb.name, k, origins[k], rot, axial, cross,
                rest_head + u0 * (seg_rest * k), rest_r,
            )
        )
    return out


def evaluate_pose(pose: Pose) -> list[SegmentTransform]:
    """Segment transforms of every bone, in rig segment order."""
    tangents = end_tangents(pose.rig, pose.joints)
    out: list[SegmentTransform] = []
    for bb in pose.rig.bones:
        out.extend(evaluate_bbone(bb, pose, tangents))
    return out


# ---------------------------------------------------------------------- struts


@dataclass(frozen=True, eq=False)
class Strut:
    coil_name: str
    bone_name: str
    end: str
    offset: np.ndarray  # mm, in the coil's bind-time frame

    def to_dict(self) -> dict:
        return {"coil": self.coil_name, "bone": self.bone_name, "end": self.end,
                "offset": [float(v) for v in self.offset]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Strut":
        return cls(str(d["coil"]), str(d["bone"]), str(d["end"]), np.asarray(d["offset"], dtype=float))


@dataclass(frozen=True)
class Target:
    position: np.ndarray
    direction: np.ndarray
    weight: float


def bind_struts(rig: Rig, sweep, layout, bind_frame: int,
                assignment: Mapping[str, Sequence[str]], max_offset: float = 30.0) -> list[Strut]:
    """Bind each assigned coil to a bone end at ``bind_frame``.

    The offset is the rest endpoint minus the coil position, expressed in the
    coil frame of :func:`ematongue.geometry.coil_frame`.
    """
    if not 0 <= bind_frame < sweep.n_frames:
        raise RigError(f"bind frame {bind_frame} outside sweep of {sweep.n_frames} frames")
    if layout is not None:
        layout.check_covers(sweep)
    struts = []
    seen: dict[tuple[str, str], str] = {}
    for coil, (bone, end) in assignment.items():
        if coil not in sweep.coil_names:
            raise RigError(f"unknown coil {coil!r}")
        if bone not in rig.index:
            raise RigError(f"unknown bone {bone!r}")
        joint = rig.endpoint_joint(bone, end)
        if (bone, end) in seen:
            raise RigError(f"coils {seen[(bone, end)]!r} and {coil!r} both target {bone}.{end}")
        seen[(bone, end)] = coil
        s = sweep.sample(bind_frame, coil)
        if not s.valid:
            raise RigError(f"coil {coil!r} invalid at bind frame {bind_frame}")
        offset = coil_frame(s.direction).T @ (rig.rest_joints[joint] - s.position)
        if np.linalg.norm(offset) > max_offset:
            raise RigError(f"strut {coil}->{bone}.{end} offset {np.linalg.norm(offset):.2f} mm exceeds {max_offset} mm")
        struts.append(Strut(coil, bone, end, offset))
    return struts


def strut_targets(struts: Iterable[Strut], frame: Mapping[str, Any]) -> dict[tuple[str, str], Target]:
    """Map each strut's bone end to its target for one frame of coil samples."""
    out = {}
    for s in struts:
        sample = frame[s.coil_name]
        if sample.valid:
            pos = sample.position + coil_frame(sample.direction) @ s.offset
            out[(s.bone_name, s.end)] = Target(pos, np.asarray(sample.direction, dtype=float), 1.0)
        else:
            out[(s.bone_name, s.end)] = Target(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.0)
    return out


def coil_from_endpoint(strut: Strut, endpoint: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Coil position that places ``strut``'s target at ``endpoint``."""
    return endpoint - coil_frame(direction) @ strut.offset
