"""Actions (named pose clips) and timelines that splice them with crossfades.

Action file layout: the first line is ``#`` followed by a one-line JSON header;
the rest is CSV with one row per frame.  Columns are ``frame``, every joint's
``x,y,z`` (named ``<root>.head`` and ``<bone>.tail``), every bone's
``head_twist``/``tail_twist`` and the solver diagnostics.  Floats are written
with ``repr`` so a write/read cycle is exact.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .ema_io import Annotation, ParseError
from .rig import Pose, Rig

ACTION_FORMAT_VERSION = 1


class NlaError(ValueError):
    pass


@dataclass(eq=False)
class Action:
    name: str
    frames: list[Pose]
    rate: float
    source: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise NlaError(f"action {self.name!r} has no frames")
        rig = self.frames[0].rig
        others = {id(p.rig): p.rig for p in self.frames if p.rig is not rig}
        if any(r.fingerprint != rig.fingerprint for r in others.values()):
            raise NlaError(f"action {self.name!r} mixes rigs")
        if not self.rate > 0:
            raise NlaError("rate must be positive")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def rig(self) -> Rig:
        return self.frames[0].rig


@dataclass(frozen=True)
class TimelineEntry:
    action: str
    crossfade_frames: int = 0


@dataclass(frozen=True)
class Timeline:
    entries: tuple[TimelineEntry, ...]
    name: str = "timeline"

    @classmethod
    def from_json(cls, doc: Any) -> "Timeline":
        if isinstance(doc, str):
            doc = json.loads(doc)
        name = "timeline"
        if isinstance(doc, Mapping):
            name = str(doc.get("name", name))
            doc = doc["entries"]
        entries = []
        for i, e in enumerate(doc):
            try:
                entries.append(TimelineEntry(str(e["action"]), int(e.get("crossfade_frames", 0))))
            except (KeyError, TypeError, ValueError):
                raise NlaError(f"timeline entry {i}: expected {{action, crossfade_frames}}") from None
        if not entries:
            raise NlaError("empty timeline")
        return cls(tuple(entries), name)

    def to_json(self) -> str:
        return json.dumps([{"action": e.action, "crossfade_frames": e.crossfade_frames} for e in self.entries],
                          indent=1) + "\n"


def segment_actions(solves: Sequence[Any], annotations: Sequence[Annotation], rate: float,
                    sweep_id: str = "sweep") -> list[Action]:
    """One action per annotation; accepts FrameSolve objects or bare poses.

    Repeated labels get ``.001``, ``.002`` suffixes in annotation order.
    Overlapping ranges that share a label are an error.
    """
    poses = [getattr(s, "pose", s) for s in solves]
    by_label: dict[str, list[Annotation]] = {}
    for a in annotations:
        if not 0 <= a.start_frame < a.end_frame <= len(poses):
            raise NlaError(f"annotation {a.label!r} [{a.start_frame}, {a.end_frame}) outside {len(poses)} frames")
        for other in by_label.get(a.label, []):
            if a.start_frame < other.end_frame and other.start_frame < a.end_frame:
                raise NlaError(f"overlapping annotations named {a.label!r}")
        by_label.setdefault(a.label, []).append(a)
    seen: dict[str, int] = {}
    out = []
    for a in annotations:
        n = seen.get(a.label, 0)
        seen[a.label] = n + 1
        name = a.label if n == 0 else f"{a.label}.{n:03d}"
        frames = [p.copy() for p in poses[a.start_frame:a.end_frame]]
        out.append(Action(name, frames, rate, {"sweep": sweep_id, "start_frame": a.start_frame,
                                               "end_frame": a.end_frame}))
    return out


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2 * np.pi)


def blend_poses(a: Pose, b: Pose, t: float) -> Pose:
    """Pose-space interpolation: lerp joints, shortest-arc twists.

    Stretch follows from the blended endpoints.  Intermediate twists are
    reported in (-pi, pi].
    """
    if a.rig is not b.rig and a.rig.fingerprint != b.rig.fingerprint:
        raise NlaError("cannot blend poses of different rigs")
    if not 0.0 <= t <= 1.0:
        raise NlaError(f"blend factor {t} outside [0, 1]")
    if t == 0.0:
        return Pose(a.rig, a.joints.copy(), a.head_twist.copy(), a.tail_twist.copy())
    if t == 1.0:
        return Pose(a.rig, b.joints.copy(), b.head_twist.copy(), b.tail_twist.copy())
    joints = a.joints + t * (b.joints - a.joints)
    ht = wrap_angle(a.head_twist + t * wrap_angle(b.head_twist - a.head_twist))
    tt = wrap_angle(a.tail_twist + t * wrap_angle(b.tail_twist - a.tail_twist))
    return Pose(a.rig, joints, ht, tt)


def linear_ramp(k: int, n: int) -> float:
    return 0.5 if n == 1 else k / (n - 1)


def check_timeline(timeline: Timeline, actions: Mapping[str, Action]) -> list[Action]:
    seq = []
    for e in timeline.entries:
        if e.action not in actions:
            raise NlaError(f"unknown action {e.action!r}")
        seq.append(actions[e.action])
    rates = {a.rate for a in seq}
    if len(rates) > 1:
        raise NlaError(f"rate mismatch in timeline: {sorted(rates)}")
    entries = timeline.entries
    if entries[-1].crossfade_frames:
        raise NlaError("last timeline entry cannot crossfade into nothing")
    for i, e in enumerate(entries[:-1]):
        n = e.crossfade_frames
        if n < 0:
            raise NlaError(f"entry {i}: negative crossfade")
        shorter = min(len(seq[i]), len(seq[i + 1]))
        if n >= shorter and n > 0:
            raise NlaError(f"entry {i}: crossfade of {n} frames too long for neighbours of "
                           f"{len(seq[i])} and {len(seq[i + 1])} frames")
    for i in range(1, len(seq) - 1):
        if entries[i - 1].crossfade_frames + entries[i].crossfade_frames > len(seq[i]):
            raise NlaError(f"entry {i}: incoming and outgoing crossfades overlap")
    return seq


def resolve_timeline(timeline: Timeline, actions: Mapping[str, Action], ramp=linear_ramp) -> Action:
    """Concatenate the timeline's actions, blending across each crossfade.

    A crossfade of ``n`` frames overlaps the last ``n`` frames of one action
    with the first ``n`` of the next, blended with factor ``ramp(k, n)``.
    """
    seq = check_timeline(timeline, actions)
    entries = timeline.entries
    if len(seq) == 1:
        a = seq[0]
        return Action(a.name, [p.copy() for p in a.frames], a.rate, dict(a.source))
    out: list[Pose] = []
    skip = 0  # frames of the current action already consumed by the previous crossfade
    for i, act in enumerate(seq):
        n_out = entries[i].crossfade_frames if i < len(seq) - 1 else 0
        body_end = len(act) - n_out
        out.extend(p.copy() for p in act.frames[skip:body_end])
        if n_out:
            nxt = seq[i + 1]
            for k in range(n_out):
                out.append(blend_poses(act.frames[body_end + k], nxt.frames[k], ramp(k, n_out)))
        skip = n_out
    return Action(timeline.name, out, seq[0].rate,
                  {"timeline": [{"action": e.action, "crossfade_frames": e.crossfade_frames} for e in entries]})


# ----------------------------------------------------------------- file format


def pose_columns(rig: Rig) -> list[str]:
    root = rig.bones[0].name
    joint_names = [f"{root}.head"] + [f"{b.name}.tail" for b in rig.bones]
    cols = ["frame"]
    for j in joint_names:
        cols += [f"{j}_x", f"{j}_y", f"{j}_z"]
    for b in rig.bones:
        cols += [f"{b.name}.head_twist", f"{b.name}.tail_twist"]
    return cols + ["residual", "iterations", "converged"]


def format_action(action: Action) -> str:
    rig = action.rig
    header = {
        "format_version": ACTION_FORMAT_VERSION,
        "name": action.name,
        "rate": action.rate,
        "rig": rig.fingerprint,
        "source": action.source,
    }
    buf = io.StringIO()
    buf.write("#" + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(pose_columns(rig))
    for i, p in enumerate(action.frames):
        row = [str(i)]
        row += [repr(float(v)) for v in p.joints.ravel()]
        for h, t in zip(p.head_twist, p.tail_twist):
            row += [repr(float(h)), repr(float(t))]
        row += [repr(float(p.residual)), str(int(p.iterations)), "1" if p.converged else "0"]
        w.writerow(row)
    return buf.getvalue()


def parse_action(text: str, rig: Rig) -> Action:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ParseError("missing action header", 1)
    try:
        header = json.loads(lines[0][1:])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad action header: {exc.msg}", 1) from None
    if header.get("format_version") != ACTION_FORMAT_VERSION:
        raise ParseError(f"unsupported action format_version {header.get('format_version')!r}", 1)
    if header.get("rig") != rig.fingerprint:
        raise ParseError("action was solved for a different rig", 1)
    cols = pose_columns(rig)
    if len(lines) < 2 or lines[1].split(",") != cols:
        raise ParseError("action columns do not match the rig", 2)
    nj = len(rig) + 1
    frames = []
    for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
        if len(row) != len(cols):
            raise ParseError(f"expected {len(cols)} fields, got {len(row)}", lineno)
        try:
            vals = [float(v) for v in row[1:-2]]
            it = int(row[-2])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        joints = np.array(vals[: 3 * nj]).reshape(nj, 3)
        tw = np.array(vals[3 * nj: 3 * nj + 2 * len(rig)]).reshape(-1, 2)
        frames.append(Pose(rig, joints, tw[:, 0].copy(), tw[:, 1].copy(), vals[-1], it, row[-1] == "1"))
    if not frames:
        raise ParseError("action has no frames")
    return Action(str(header["name"]), frames, float(header["rate"]), header.get("source", {}))

