"""Tongue animation from EMA sweeps: ingest, rig, IK, skinning, NLA and bake."""
from __future__ import annotations

__version__ = "0.1.0"

from .ema_io import EmaSweep, clean, head_correct, parse_sweep, resample
from .ik import IkSettings, solve_frame, solve_sweep
from .nla import Action, Timeline, blend_poses, resolve_timeline, segment_actions
from .rig import Pose, Rig, bind_struts, build_rig, default_rig, evaluate_pose
from .skin import Mesh, auto_weights, deform, load_mesh, register_landmarks

__all__ = [
    "Action", "EmaSweep", "IkSettings", "Mesh", "Pose", "Rig", "Timeline",
    "auto_weights", "bind_struts", "blend_poses", "build_rig", "clean", "default_rig",
    "deform", "evaluate_pose", "head_correct", "load_mesh", "parse_sweep",
    "register_landmarks", "resample", "resolve_timeline", "segment_actions",
    "solve_frame", "solve_sweep",
]
