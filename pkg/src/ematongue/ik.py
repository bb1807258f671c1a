"""Per-frame strut-targeted inverse kinematics.

Unknowns are the free joint positions (the root head is pinned by default)
and each bone's head/tail twist.  The stacked residual vector is::

    [ w_i (p_i - target_i)              position, per strut (3 rows)
      w_i w_d (tangent_i - coil_dir_i)  direction, per strut (3 rows)
      w_t (x - warm_start)              temporal prior (when warm-started)
      w_r (x - rest) ]                  rest prior

The direction rows have squared norm ``2 w_d^2 (1 - cos angle)``, about
``(w_d * angle)^2`` for small angles, so ``w_d`` reads as millimetres per radian.
Volume is not a residual: cross-section scaling in :mod:`ematongue.rig`
keeps each bone's volume fixed for any stretch.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Mapping, Sequence

import numpy as np

from .geometry import coil_frame, cross3
from .rig import Pose, Rig, Strut, Target, end_tangents

STEP_TOL = 1e-6  # mm


@dataclass(frozen=True)
class IkSettings:
    max_iterations: int = 50
    damping: float = 1e-3
    tolerance: float = 1e-2  # mm, position residual RMS
    direction_weight: float = 5.0  # mm per radian
    temporal_weight: float = 1e-3
    rest_weight: float = 1e-5
    volume_tolerance: float = 1e-3
    max_step: float = 5.0  # mm per joint per iteration
    pin_root: bool = True

    def __post_init__(self):
        for name in ("damping", "direction_weight", "temporal_weight", "rest_weight", "volume_tolerance"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tolerance <= 0 or self.max_step <= 0:
            raise ValueError("tolerance and max_step must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "IkSettings":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown IK settings {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameSolve:
    pose: Pose
    residual_rms: float
    target_residuals: dict[tuple[str, str], dict[str, float]]
    converged: bool
    iterations: int
    objective_trace: list[float] = field(default_factory=list)


class IkProblem:
    """Residuals and analytic Jacobian for one frame's targets."""

    def __init__(self, rig: Rig, targets: Mapping[tuple[str, str], Target],
                 settings: IkSettings, warm_start: Pose | None = None):
        self.rig = rig
        self.settings = settings
        nb = len(rig)
        self.free = np.arange(1 if settings.pin_root else 0, nb + 1)
        self.col = np.full(nb + 1, -1)
        self.col[self.free] = 3 * np.arange(len(self.free))
        self.n_pos = 3 * len(self.free)
        self.n = self.n_pos + 2 * nb

        keys = list(targets)
        self.keys = keys
        self.t_bone = np.array([rig.index[b] for b, _ in keys], dtype=int)
        self.t_joint = np.array([rig.endpoint_joint(b, e) for b, e in keys], dtype=int)
        self.t_pos = np.array([targets[k].position for k in keys], dtype=float).reshape(-1, 3)
        self.t_dir = np.array([targets[k].direction for k in keys], dtype=float).reshape(-1, 3)
        self.t_w = np.array([targets[k].weight for k in keys], dtype=float)
        live = self.t_w > 0
        if not (np.isfinite(self.t_pos[live]).all() and np.isfinite(self.t_dir[live]).all()):
            raise ValueError("non-finite IK target")
        self.t_dir[~live] = (0.0, 0.0, 1.0)
        self.t_pos[~live] = 0.0

        self.pinned = rig.rest_joints.copy()
        self.x_rest = self.pack(Pose.rest(rig))
        self.x_warm = None
        if warm_start is not None:
            if warm_start.rig is not rig and warm_start.rig.fingerprint != rig.fingerprint:
                raise ValueError("warm start belongs to a different rig")
            if not warm_start.is_finite():
                raise ValueError("non-finite warm start")
            self.x_warm = self.pack(warm_start)

    def pack(self, pose: Pose) -> np.ndarray:
        return np.concatenate([pose.joints[self.free].ravel(), pose.head_twist, pose.tail_twist])

    def unpack(self, x: np.ndarray) -> Pose:
        nb = len(self.rig)
        joints = self.pinned.copy()
        joints[self.free] = x[: self.n_pos].reshape(-1, 3)
        return Pose(self.rig, joints, x[self.n_pos : self.n_pos + nb].copy(), x[self.n_pos + nb :].copy())

    def _joints(self, x: np.ndarray) -> np.ndarray:
        joints = self.pinned.copy()
        joints[self.free] = x[: self.n_pos].reshape(-1, 3)
        return joints

    def residuals(self, x: np.ndarray) -> np.ndarray:
        return self.residuals_and_jacobian(x, jacobian=False)[0]

    def residuals_and_jacobian(self, x: np.ndarray, jacobian: bool = True):
        rig, s = self.rig, self.settings
        joints = self._joints(x)
        chords = joints[rig.tail_joint] - joints[rig.head_joint]
        lengths = np.linalg.norm(chords, axis=1)
        units = chords / lengths[:, None]
        ssum = rig.incidence_matrix @ units
        snorm = np.linalg.norm(ssum, axis=1)
        dirs = ssum / snorm[:, None]

        nt = len(self.keys)
        w = self.t_w
        wd = s.direction_weight
        tj = self.t_joint
        r_pos = w[:, None] * (joints[tj] - self.t_pos)
        d0 = rig.rest_joint_dirs[tj]
        d = dirs[tj]
        u0 = rig.rest_dirs[self.t_bone]
        a = cross3(d0, d)
        c = np.einsum("ij,ij->i", d0, d)
        au = np.einsum("ij,ij->i", a, u0)
        inv = 1.0 / (1.0 + c)
        tangent = c[:, None] * u0 + cross3(a, u0) + a * (au * inv)[:, None]
        r_dir = (w * wd)[:, None] * (tangent - self.t_dir)
        jac = None
        if jacobian:
            rows = 6 * nt + (self.n if self.x_warm is not None else 0) + self.n
            jac = np.zeros((rows, self.n))
            eye = np.eye(3)
            unit_proj = (eye - units[:, :, None] * units[:, None, :]) / lengths[:, None, None]
            sk = _skew_batch(d0)
            dt_dd = (
                u0[:, :, None] * d0[:, None, :]
                - _skew_batch(u0) @ sk
                + ((au[:, None, None] * eye + a[:, :, None] * u0[:, None, :]) @ sk) * inv[:, None, None]
                - a[:, :, None] * d0[:, None, :] * (au * inv * inv)[:, None, None]
            )
            proj = (eye - d[:, :, None] * d[:, None, :]) / snorm[tj][:, None, None]
            g = (w * wd)[:, None, None] * (dt_dd @ proj)
            for k in range(nt):
                c0 = 3 * k
                j = tj[k]
                col = self.col[j]
                if col >= 0:
                    jac[c0 : c0 + 3, col : col + 3] = w[k] * eye
                if w[k] == 0.0:
                    continue
                r0 = 3 * nt + c0
                for b in rig.incidence[j]:
                    blk = g[k] @ unit_proj[b]
                    ct = self.col[rig.tail_joint[b]]
                    ch = self.col[rig.head_joint[b]]
                    if ct >= 0:
                        jac[r0 : r0 + 3, ct : ct + 3] += blk
                    if ch >= 0:
                        jac[r0 : r0 + 3, ch : ch + 3] -= blk

        parts = [r_pos.ravel(), r_dir.ravel()]
        row = 6 * nt
        if self.x_warm is not None:
            parts.append(s.temporal_weight * (x - self.x_warm))
            if jacobian:
                jac[row : row + self.n] = s.temporal_weight * np.eye(self.n)
            row += self.n
        parts.append(s.rest_weight * (x - self.x_rest))
        if jacobian:
            jac[row : row + self.n] = s.rest_weight * np.eye(self.n)
        return np.concatenate(parts), jac

    def target_report(self, x: np.ndarray) -> tuple[float, dict]:
        joints = self._joints(x)
        err = np.linalg.norm(joints[self.t_joint] - self.t_pos, axis=1)
        heads, tails = end_tangents(self.rig, joints)
        report = {}
        for k, key in enumerate(self.keys):
            t = tails[self.t_bone[k]] if key[1] == "tail" else heads[self.t_bone[k]]
            ang = math.acos(max(-1.0, min(1.0, float(t @ self.t_dir[k]))))
            report[key] = {"position": float(err[k]), "angle": ang, "weight": float(self.t_w[k])}
        live = self.t_w > 0
        rms = float(np.sqrt(np.mean(err[live] ** 2))) if live.any() else 0.0
        return rms, report


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _clamp_step(delta: np.ndarray, n_pos: int, max_step: float) -> np.ndarray:
    per_joint = np.linalg.norm(delta[:n_pos].reshape(-1, 3), axis=1)
    m = per_joint.max() if len(per_joint) else 0.0
    if m > max_step:
        delta = delta * (max_step / m)
    return delta


def solve_frame(rig: Rig, struts: Sequence[Strut] | None, frame: Mapping[str, Any] | None,
                warm_start: Pose | None = None, settings: IkSettings | None = None,
                targets: Mapping[tuple[str, str], Target] | None = None) -> FrameSolve:
    """Damped Gauss-Newton solve for one frame.

    Pass coil samples via ``frame`` (with ``struts``) or precomputed
    ``targets``.  The initial guess is ``warm_start`` (rest when absent); the
    temporal prior is active only when a warm start is given.  Failure to
    converge is reported through :attr:`FrameSolve.converged`, not raised.
    """
    from .rig import strut_targets

    settings = settings or IkSettings()
    if targets is None:
        targets = strut_targets(struts, frame)
    prob = IkProblem(rig, targets, settings, warm_start)
    x = prob.x_warm.copy() if prob.x_warm is not None else prob.x_rest.copy()
    r, jac = prob.residuals_and_jacobian(x)
    f = float(r @ r)
    lam = settings.damping
    trace = [f]
    step = math.inf
    it = 0
    while it < settings.max_iterations:
        it += 1
        h = jac.T @ jac
        g = jac.T @ r
        a = h + lam * np.diag(np.diag(h) + 1e-12)
        try:
            delta = -np.linalg.solve(a, g)
        except np.linalg.LinAlgError:
            delta = -np.linalg.lstsq(a, g, rcond=None)[0]
        delta = _clamp_step(delta, prob.n_pos, settings.max_step)
        step = float(np.linalg.norm(delta))
        if step < STEP_TOL:
            break
        x_new = x + delta
        r_new, jac_new = prob.residuals_and_jacobian(x_new)
        f_new = float(r_new @ r_new)
        if np.isfinite(f_new) and f_new <= f:
            x, r, jac, f = x_new, r_new, jac_new, f_new
            lam *= 0.5
            trace.append(f)
        else:
            lam *= 2.0
            if lam > 1e16:
                break
    rms, report = prob.target_report(x)
    converged = rms < settings.tolerance or step < STEP_TOL
    pose = prob.unpack(x)
    pose.residual, pose.iterations, pose.converged = rms, it, converged
    return FrameSolve(pose, rms, report, converged, it, trace)


# ------------------------------------------------------------------- sweeps


def _frame_targets(struts: Sequence[Strut], coil_idx: Sequence[int], sweep, f: int) -> dict:
    out = {}
    for s, c in zip(struts, coil_idx):
        if sweep.valid[f, c]:
            d = sweep.directions[f, c]
            out[(s.bone_name, s.end)] = Target(sweep.positions[f, c] + coil_frame(d) @ s.offset, d, 1.0)
        else:
            out[(s.bone_name, s.end)] = Target(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.0)
    return out


def _solve_range(rig, struts, sweep, settings, start, stop) -> list[FrameSolve]:
    coil_idx = [sweep.coil_index(s.coil_name) for s in struts]
    prev = Pose.rest(rig)
    out = []
    for f in range(start, stop):
        res = solve_frame(rig, None, None, prev, settings, targets=_frame_targets(struts, coil_idx, sweep, f))
        out.append(res)
        prev = res.pose
    return out


def _partitions(sweep) -> list[tuple[int, int]]:
    cuts = {0, sweep.n_frames}
    for a in sweep.annotations:
        cuts.update((a.start_frame, a.end_frame))
    cuts = sorted(cuts)
    return list(zip(cuts[:-1], cuts[1:]))


def solve_sweep(rig: Rig, struts: Sequence[Strut], sweep, settings: IkSettings | None = None,
                parallel: bool = False, workers: int | None = None) -> list[FrameSolve]:
    """Solve every frame, warm-starting from the previous frame.

    ``parallel=True`` cuts the sweep at annotation boundaries and solves the
    pieces independently, each warm-started from rest; results can differ
    from the sequential mode.
    """
    settings = settings or IkSettings()
    if sweep.n_frames == 0:
        raise ValueError("empty sweep")
    if not parallel:
        return _solve_range(rig, struts, sweep, settings, 0, sweep.n_frames)
    parts = _partitions(sweep)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_solve_range, rig, struts, sweep, settings, a, b) for a, b in parts]
        out: list[FrameSolve] = []
        for fut in futures:
            out.extend(fut.result())
    # poses come back with unpickled rig copies; rebind to the caller's rig
    for res in out:
        res.pose.rig = rig
    return out


def bone_volume(bone: str, pose: Pose) -> float:
    """Bone volume in mm^3 with cross-section coupled to stretch."""
    rig = pose.rig
    b = rig.index[bone]
    bb = rig.bones[b]
    stretch = float(pose.stretch[b])
    cross = 1.0 / math.sqrt(stretch)
    return math.pi * (bb.rest_radius * cross) ** 2 * (bb.rest_length * stretch)


def rest_volume(bone: str, rig: Rig) -> float:
    bb = rig.bone(bone)
    return math.pi * bb.rest_radius ** 2 * bb.rest_length


def solve_report(solves: Sequence[FrameSolve], mode: str = "sequential", settings: IkSettings | None = None) -> dict:
    """Aggregate per-frame diagnostics into a JSON-ready dict."""
    res = np.array([s.residual_rms for s in solves])
    rig = solves[0].pose.rig if solves else None
    vol_dev = 0.0
    if rig is not None:
        rest = np.array([rest_volume(b.name, rig) for b in rig.bones])
        for s in solves:
            vols = np.array([bone_volume(b.name, s.pose) for b in rig.bones])
            vol_dev = max(vol_dev, float(np.max(np.abs(vols - rest) / rest)))
    return {
        "format_version": 1,
        "mode": mode,
        "n_frames": len(solves),
        "mean_residual": float(res.mean()) if len(res) else 0.0,
        "max_residual": float(res.max()) if len(res) else 0.0,
        "non_converged_frames": [i for i, s in enumerate(solves) if not s.converged],
        "non_finite_frames": [i for i, s in enumerate(solves) if not s.pose.is_finite()],
        "max_volume_deviation": vol_dev,
        "settings": (settings or IkSettings()).to_dict(),
        "frames": [
            {"frame": i, "residual_rms": s.residual_rms, "iterations": s.iterations, "converged": s.converged}
            for i, s in enumerate(solves)
        ],
    }


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"
