"""Synthetic EMA corpus with known ground truth.

A script of target poses is played through smoothstep transitions; every
strut's coil is placed by inverting the strut mapping on the posed endpoint,
with the coil pointing along the bone-end tangent.  Noise, outliers and
dropout are applied only after the ground truth has been recorded.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .ema_io import Annotation, CoilLayout, EmaSweep
from .geometry import axis_angle_matrix, coil_frame
from .nla import blend_poses
from .rig import Pose, Rig, Strut, default_assignment, end_tangents, load_data
from .skin import Mesh


@dataclass(frozen=True)
class NoiseSpec:
    sigma_pos: float = 0.0  # mm, Gaussian, all coils
    outlier_rate: float = 0.0  # per tongue-coil sample
    dropout_rate: float = 0.0  # per tongue-coil sample
    outlier_range: tuple[float, float] = (10.0, 30.0)  # mm

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "NoiseSpec":
        d = dict(d or {})
        if "outlier_range" in d:
            d["outlier_range"] = tuple(d["outlier_range"])
        return cls(**d)


@dataclass(frozen=True)
class ScriptStep:
    pose: Pose
    hold: int
    transition: int


@dataclass(eq=False)
class GroundTruth:
    poses: list[Pose]
    outliers: list[dict] = field(default_factory=list)
    dropouts: list[dict] = field(default_factory=list)

    def endpoints(self) -> np.ndarray:
        return np.stack([p.joints for p in self.poses])

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "joints": [p.joints.tolist() for p in self.poses],
            "head_twist": [p.head_twist.tolist() for p in self.poses],
            "tail_twist": [p.tail_twist.tolist() for p in self.poses],
            "outliers": self.outliers,
            "dropouts": self.dropouts,
        }


def load_truth(text: str, rig: Rig) -> GroundTruth:
    d = json.loads(text)
    poses = [Pose(rig, np.asarray(j, dtype=float), np.asarray(h, dtype=float), np.asarray(t, dtype=float))
             for j, h, t in zip(d["joints"], d["head_twist"], d["tail_twist"])]
    return GroundTruth(poses, d.get("outliers", []), d.get("dropouts", []))


def default_scene() -> dict:
    return load_data("default_scene.json")


def smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def play_script(script: Sequence[ScriptStep]) -> list[Pose]:
    """Dense pose track; playback starts from the last step's pose so cycles repeat exactly."""
    if not script:
        raise ValueError("empty script")
    prev = script[-1].pose
    out = []
    for step in script:
        if step.hold < 0 or step.transition < 0:
            raise ValueError("hold and transition must be >= 0")
        for j in range(step.transition):
            out.append(blend_poses(prev, step.pose, float(smoothstep((j + 1) / step.transition))))
        out.extend(step.pose.copy() for _ in range(step.hold))
        prev = step.pose
    if not out:
        raise ValueError("script produces no frames")
    return out


def coil_samples(struts: Sequence[Strut], pose: Pose, tangents=None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Exact coil (position, direction) for every strut in ``pose``."""
    rig = pose.rig
    th, tt = tangents if tangents is not None else end_tangents(rig, pose.joints)
    out = {}
    for s in struts:
        b = rig.index[s.bone_name]
        d = th[b] if s.end == "head" else tt[b]
        out[s.coil_name] = (pose.endpoint(s.bone_name, s.end) - coil_frame(d) @ s.offset, d)
    return out


def default_struts(rig: Rig, assignment: Mapping[str, Sequence[str]] | None = None,
                   coil_height: float | None = None) -> list[Strut]:
    """Struts of coils mounted ``coil_height`` mm above their joints at rest.

    "Above" is the coil frame's second axis (world +z projected off the
    coil direction), so every offset is ``(0, -h, 0)``.
    """
    assignment = assignment or default_assignment()
    h = default_scene()["coil_height"] if coil_height is None else coil_height
    return [Strut(c, bone, end, np.array([0.0, -h, 0.0])) for c, (bone, end) in assignment.items()]


def default_layout(struts: Sequence[Strut]) -> CoilLayout:
    roles = load_data("default_layout.json")
    names = [s.coil_name for s in struts]
    entries = [(n, "tongue") for n in names] + [(n, r) for n, r in roles.items() if n not in names]
    return CoilLayout(tuple(entries))


def head_motion_transforms(n: int, rate: float, amplitude_deg: float = 0.0, amplitude_mm: float = 0.0,
                           frequency: float = 0.5) -> list[tuple[np.ndarray, np.ndarray]]:
    """Slow sinusoidal nodding plus drift, as per-frame ``(R, t)``."""
    out = []
    for f in range(n):
        ph = np.sin(2 * np.pi * frequency * f / rate)
        r = axis_angle_matrix(np.array([1.0, 0.0, 0.0]), np.radians(amplitude_deg) * ph)
        out.append((r, np.array([0.0, amplitude_mm * ph, 0.5 * amplitude_mm * ph])))
    return out


def generate_gesture(rig: Rig, struts: Sequence[Strut], script: Sequence[ScriptStep], rate: float = 200.0,
                     noise: NoiseSpec | Mapping | None = None, seed: int = 0,
                     static_coils: Mapping[str, Mapping] | None = None,
                     head_motion: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
                     annotations: Sequence[Annotation] = ()) -> tuple[EmaSweep, GroundTruth]:
    if not rate > 0:
        raise ValueError("rate must be positive")
    noise = noise if isinstance(noise, NoiseSpec) else NoiseSpec.from_dict(noise)
    if static_coils is None:
        static_coils = default_scene()["static_coils"]
    poses = play_script(script)
    n = len(poses)
    tongue = [s.coil_name for s in struts]
    names = tuple(tongue) + tuple(k for k in static_coils if k not in tongue)
    pos = np.empty((n, len(names), 3))
    dirs = np.empty((n, len(names), 3))
    for f, p in enumerate(poses):
        samples = coil_samples(struts, p)
        for c, name in enumerate(tongue):
            pos[f, c], dirs[f, c] = samples[name]
    for c, name in enumerate(names[len(tongue):], start=len(tongue)):
        d = np.asarray(static_coils[name]["direction"], dtype=float)
        pos[:, c] = static_coils[name]["position"]
        dirs[:, c] = d / np.linalg.norm(d)
    if head_motion is not None:
        if len(head_motion) != n:
            raise ValueError("head motion length must match the script")
        rots = np.stack([r for r, _ in head_motion])
        trans = np.stack([t for _, t in head_motion])
        pos = np.einsum("fij,fcj->fci", rots, pos) + trans[:, None]
        dirs = np.einsum("fij,fcj->fci", rots, dirs)

    truth = GroundTruth([p.copy() for p in poses])
    rng = np.random.default_rng(seed)
    valid = np.ones((n, len(names)), dtype=bool)
    if noise.sigma_pos > 0:
        pos = pos + rng.normal(0.0, noise.sigma_pos, pos.shape)
    nt = len(tongue)
    if noise.outlier_rate > 0:
        hit = rng.random((n, nt)) < noise.outlier_rate
        for f, c in zip(*np.nonzero(hit)):
            v = rng.normal(size=3)
            mag = rng.uniform(*noise.outlier_range)
            disp = mag * v / np.linalg.norm(v)
            pos[f, c] += disp
            truth.outliers.append({"frame": int(f), "coil": names[c], "displacement": disp.tolist()})
    if noise.dropout_rate > 0:
        drop = rng.random((n, nt)) < noise.dropout_rate
        valid[:, :nt] &= ~drop
        truth.dropouts = [{"frame": int(f), "coil": names[c]} for f, c in zip(*np.nonzero(drop))]
    pos[~valid] = np.nan
    dirs[~valid] = np.nan
    sweep = EmaSweep(rate, names, pos, dirs, valid, tuple(annotations))
    return sweep, truth


# ---------------------------------------------------------------- [ta] cycles


def displaced_pose(rig: Rig, offsets: Mapping[str, Sequence[float]]) -> Pose:
    """Rest pose with selected bone tails moved by the given offsets (mm)."""
    p = Pose.rest(rig)
    for bone, off in offsets.items():
        p.joints[rig.tail_joint[rig.index[bone]]] += np.asarray(off, dtype=float)
    return p


def ta_poses(rig: Rig) -> tuple[Pose, Pose]:
    """Vowel (the rest pose) and alveolar closure poses for the default rig."""
    low = Pose.rest(rig)
    closure = displaced_pose(rig, {
        "spine.000": (0.0, 0.5, 1.0), "spine.001": (0.0, 1.5, 2.5),
        "spine.002": (0.0, 2.5, 7.0), "spine.003": (0.0, 3.0, 13.0),
        "lateral_l.000": (-0.5, 0.5, 2.0), "lateral_r.000": (0.5, 0.5, 2.0),
        "lateral_l.001": (-1.0, 1.5, 4.5), "lateral_r.001": (1.0, 1.5, 4.5),
    })
    return low, closure


TA_TIMING = {"vowel_hold": 24, "to_closure": 26, "closure_hold": 14, "to_vowel": 26}


def ta_cycle_script(rig: Rig, cycles: int = 1, timing: Mapping[str, int] | None = None) -> list[ScriptStep]:
    t = dict(TA_TIMING, **(timing or {}))
    vowel, closure = ta_poses(rig)
    cycle = [ScriptStep(closure, t["closure_hold"], t["to_closure"]),
             ScriptStep(vowel, t["vowel_hold"], t["to_vowel"])]
    return cycle * cycles


def ta_cycle_length(timing: Mapping[str, int] | None = None) -> int:
    t = dict(TA_TIMING, **(timing or {}))
    return sum(t.values())


def ta_annotations(cycles: int, timing: Mapping[str, int] | None = None, label: str = "ta") -> list[Annotation]:
    n = ta_cycle_length(timing)
    return [Annotation(label, k * n, (k + 1) * n) for k in range(cycles)]


def first_rest_hold_frame(timing: Mapping[str, int] | None = None) -> int:
    """Frame index inside the first vowel hold, usable as a bind frame."""
    t = dict(TA_TIMING, **(timing or {}))
    return t["to_closure"] + t["closure_hold"] + t["to_vowel"]


# ------------------------------------------------------------------ tongue mesh


def tongue_mesh(rig: Rig, n_lat: int = 12, n_lon: int = 24, margin: float = 3.0) -> Mesh:
    """Closed ellipsoid hugging the rest rig, with landmark vertices.

    Landmarks: ``apex`` (most anterior), ``dorsum`` (highest), ``left`` and
    ``right`` (lateral extremes).
    """
    pts = rig.rest_joints
    lo, hi = pts.min(axis=0) - margin, pts.max(axis=0) + margin
    centre, radii = (lo + hi) / 2, (hi - lo) / 2
    verts = [centre + radii * np.array([0.0, 0.0, 1.0])]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * np.pi * j / n_lon
            verts.append(centre + radii * np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)]))
    verts.append(centre - radii * np.array([0.0, 0.0, 1.0]))
    v = np.array(verts)
    tris = []
    bottom = len(v) - 1
    for j in range(n_lon):
        tris.append((0, 1 + j, 1 + (j + 1) % n_lon))
    for i in range(n_lat - 2):
        r0, r1 = 1 + i * n_lon, 1 + (i + 1) * n_lon
        for j in range(n_lon):
            a, b = r0 + j, r0 + (j + 1) % n_lon
            c, d = r1 + j, r1 + (j + 1) % n_lon
            tris += [(a, c, d), (a, d, b)]
    last = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        tris.append((last + j, bottom, last + (j + 1) % n_lon))
    marks = {"apex": int(np.argmax(v[:, 1])), "dorsum": 0, "left": int(np.argmin(v[:, 0])),
             "right": int(np.argmax(v[:, 0]))}
    return Mesh(v, np.array(tris), marks)
