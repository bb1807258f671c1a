"""``ematongue`` command line: one subcommand per pipeline stage.

Stages talk through files.  A project config (JSON) names the rig, coil
layout, strut assignment, mesh and settings; relative paths in it resolve
against the config's directory.  Flags override config values, which
override built-in defaults.

Failures exit with status 2 and print one JSON object on stderr:
``{"error": <kind>, "message": <text>, ...}``.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from .bake import bake, export_animation, export_obj_sequence
from .ema_io import (CoilLayout, EmaSweep, ParseError, clean, format_annotations, format_sweep, head_correct,
                     parse_annotations, parse_layout, parse_sweep, resample)
from .ik import IkSettings, bone_volume, dumps_report, rest_volume, solve_report, solve_sweep
from .nla import Action, Timeline, format_action, parse_action, resolve_timeline, segment_actions
from .rig import Rig, Strut, bind_struts, build_rig, default_assignment, default_rig
from .skin import (Mesh, SimilarityTransform, WeightMap, auto_weights, format_heatmap, load_mesh, register_mesh,
                   save_mesh, weight_heatmap)

EXIT_ERROR = 2
BINDING_FORMAT_VERSION = 1

DEFAULTS: dict[str, Any] = {
    "bind_frame": 0,
    "stride": 1,
    "resample_rate": None,
    "allow_scale": True,
    "clean": {},
    "ik": {},
    "weights": {},
}


class CliError(Exception):
    def __init__(self, kind: str, message: str, **extra):
        super().__init__(message)
        self.kind = kind
        self.extra = extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route usage errors through the JSON error path
        raise CliError("usage", message, usage=self.format_usage().strip())


# ------------------------------------------------------------------ config


class Project:
    """Config values with flag > config > default precedence."""

    def __init__(self, doc: Mapping[str, Any] | None = None, base: Path | None = None):
        self.doc = dict(doc or {})
        self.base = base or Path.cwd()

    @classmethod
    def load(cls, path: str | None) -> "Project":
        if path is None:
            return cls()
        p = Path(path)
        doc = _read_json(p)
        if not isinstance(doc, dict):
            raise CliError("schema", "config must be a JSON object", path=str(p))
        return cls(doc, p.parent)

    def get(self, key: str, flag: Any = None) -> Any:
        if flag is not None:
            return flag
        if key in self.doc:
            return self.doc[key]
        return DEFAULTS.get(key)

    def path(self, key: str, flag: str | None = None) -> Path | None:
        if flag is not None:
            return Path(flag)
        v = self.doc.get(key)
        if v is None or not isinstance(v, str):
            return None
        return self.base / v

    def rig(self) -> Rig:
        p = self.path("rig")
        return build_rig(_read_json(p)) if p else default_rig()

    def layout(self) -> CoilLayout | None:
        v = self.doc.get("layout")
        if v is None:
            return None
        if isinstance(v, dict):
            return CoilLayout(tuple((str(k), str(r)) for k, r in v.items()))
        return parse_layout(_read_text(self.base / v))

    def assignment(self) -> dict[str, tuple[str, str]]:
        v = self.doc.get("assignment")
        if v is None:
            return default_assignment()
        if isinstance(v, str):
            v = _read_json(self.base / v)
        return {str(k): (str(b), str(e)) for k, (b, e) in v.items()}

    def reference_pose(self) -> dict[str, list[float]] | None:
        v = self.doc.get("reference_pose")
        if isinstance(v, str):
            v = _read_json(self.base / v)
        return v

    def ik_settings(self, overrides: Mapping[str, Any] | None = None) -> IkSettings:
        d = dict(self.get("ik") or {})
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
        try:
            return IkSettings.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise CliError("schema", f"ik settings: {exc}") from None


def _read_text(path: Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CliError("missing_file", f"no such file: {path}", path=str(path)) from None
    except OSError as exc:
        raise CliError("io", f"{path}: {exc.strerror}", path=str(path)) from None


def _read_json(path: Path) -> Any:
    text = _read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError("parse", f"{path}: {exc.msg}", path=str(path), line=exc.lineno) from None


def _dump(doc: Any) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


class Writer:
    """Collects outputs; writes them unless in dry-run mode."""

    def __init__(self, dry_run: bool):
        self.dry_run = dry_run
        self.planned: list[str] = []

    def text(self, path: str | Path, text: str) -> None:
        path = Path(path)
        self.planned.append(str(path))
        if self.dry_run:
            return
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise CliError("io", f"{path}: {exc.strerror}", path=str(path)) from None


def _need(value: Any, flag: str) -> Any:
    if value is None:
        raise CliError("usage", f"missing required input {flag} (flag or config)")
    return value


def _load_sweep(path: Path, rate: float | None = None) -> EmaSweep:
    try:
        return parse_sweep(_read_text(path), rate)
    except ParseError as exc:
        raise CliError("parse", f"{path}: {exc}", path=str(path), line=exc.line) from None


def _load_action(path: Path, rig: Rig) -> Action:
    try:
        return parse_action(_read_text(path), rig)
    except ParseError as exc:
        raise CliError("parse", f"{path}: {exc}", path=str(path), line=exc.line) from None


# ----------------------------------------------------------------- binding


def binding_doc(rig: Rig, struts: Sequence[Strut], bind_frame: int, mesh: Mesh | None,
                registration: dict | None, weights: WeightMap | None) -> dict:
    return {
        "format_version": BINDING_FORMAT_VERSION,
        "rig": rig.to_dict(),
        "bind_frame": bind_frame,
        "struts": [s.to_dict() for s in struts],
        "registration": registration,
        "mesh": None if mesh is None else {"vertices": mesh.vertices.tolist(), "triangles": mesh.triangles.tolist(),
                                           "landmarks": mesh.landmarks},
        "weights": None if weights is None else weights.to_dict(),
    }


class Binding:
    def __init__(self, doc: Mapping[str, Any]):
        if doc.get("format_version") != BINDING_FORMAT_VERSION:
            raise CliError("schema", f"unsupported binding format_version {doc.get('format_version')!r}")
        self.rig = build_rig(doc["rig"])
        self.struts = [Strut.from_dict(s) for s in doc["struts"]]
        m = doc.get("mesh")
        self.mesh = None if m is None else Mesh(np.asarray(m["vertices"], dtype=float),
                                               np.asarray(m["triangles"], dtype=np.int64),
                                               {k: int(v) for k, v in m.get("landmarks", {}).items()})
        w = doc.get("weights")
        self.weights = None if w is None else WeightMap.from_dict(w)

    @classmethod
    def load(cls, path: Path) -> "Binding":
        return cls(_read_json(path))

    def require_mesh(self) -> tuple[Mesh, WeightMap]:
        if self.mesh is None or self.weights is None:
            raise CliError("schema", "binding has no mesh/weights; run bind with a mesh in the config")
        return self.mesh, self.weights


def _bind_struts(project: Project, rig: Rig, sweep: EmaSweep, bind_frame: int) -> list[Strut]:
    layout = project.layout()
    try:
        return bind_struts(rig, sweep, layout, bind_frame, project.assignment())
    except ValueError as exc:
        raise CliError("bind", str(exc)) from None


def _register(project: Project, mesh: Mesh, allow_scale: bool) -> tuple[Mesh, dict | None]:
    explicit = project.doc.get("registration")
    if explicit is not None:
        xf = SimilarityTransform.from_dict(explicit)
        return mesh.with_vertices(xf.apply(mesh.vertices)), {"transform": xf.to_dict(), "rms": None, "mode": "manual"}
    lm_path = project.path("landmarks")
    if lm_path is None:
        return mesh, None
    targets = {str(k): v for k, v in _read_json(lm_path).items()}
    try:
        moved, xf, rms = register_mesh(mesh, targets, allow_scale)
    except ValueError as exc:
        raise CliError("registration", str(exc)) from None
    return moved, {"transform": xf.to_dict(), "rms": rms, "mode": "landmarks"}


# --------------------------------------------------------------- commands


def cmd_ingest(args, project: Project, out: Writer) -> dict:
    sweep = _load_sweep(Path(args.input), args.rate_hint)
    report: dict[str, Any] = {"format_version": 1, "input_frames": sweep.n_frames, "coils": list(sweep.coil_names)}
    ann_path = project.path("annotations", args.annotations)
    if ann_path is not None:
        try:
            anns = parse_annotations(_read_text(ann_path))
        except (ParseError, ValueError) as exc:
            raise CliError("parse", f"{ann_path}: {exc}", path=str(ann_path)) from None
        sweep = EmaSweep(sweep.sample_rate, sweep.coil_names, sweep.positions, sweep.directions, sweep.valid,
                         tuple(anns))
    layout = project.layout()
    if layout is not None and layout.reference_names:
        ref = project.reference_pose()
        if ref is None:
            # fixed head frame taken from the first frame with every reference valid
            idx = [sweep.coil_index(n) for n in layout.reference_names if n in sweep.coil_names]
            ok = np.flatnonzero(sweep.valid[:, idx].all(axis=1))
            if not len(ok):
                raise CliError("ingest", "no frame has all reference coils valid")
            ref = {sweep.coil_names[i]: sweep.positions[ok[0], i].tolist() for i in idx}
        try:
            layout.check_covers(sweep)
            sweep, hc = head_correct(sweep, layout, ref)
        except ValueError as exc:
            raise CliError("ingest", str(exc)) from None
        report["head_correction"] = hc.to_dict()
    rate = project.get("resample_rate", args.resample)
    if rate is not None:
        sweep = resample(sweep, float(rate))
    try:
        sweep, events = clean(sweep, **dict(project.get("clean") or {}))
    except TypeError as exc:
        raise CliError("schema", f"clean settings: {exc}") from None
    report["clean_events"] = [e.to_dict() for e in events]
    report["output_frames"] = sweep.n_frames
    report["sample_rate"] = sweep.sample_rate
    out.text(args.output, format_sweep(sweep))
    if sweep.annotations:
        out.text(Path(args.output).with_suffix(".annotations.json"), format_annotations(sweep.annotations) + "\n")
    if args.report:
        out.text(args.report, _dump(report))
    return {"frames": sweep.n_frames, "clean_events": len(events)}


def cmd_bind(args, project: Project, out: Writer) -> dict:
    rig = project.rig()
    sweep_path = project.path("bind_sweep", args.sweep)
    sweep = _load_sweep(_need(sweep_path, "--sweep"))
    bind_frame = int(project.get("bind_frame", args.bind_frame))
    struts = _bind_struts(project, rig, sweep, bind_frame)
    mesh = weights = registration = None
    mesh_path = project.path("mesh", args.mesh)
    if mesh_path is not None:
        try:
            mesh = load_mesh(_read_text(mesh_path))
        except ParseError as exc:
            raise CliError("parse", f"{mesh_path}: {exc}", path=str(mesh_path), line=exc.line) from None
        mesh, registration = _register(project, mesh, bool(project.get("allow_scale")))
        try:
            weights = auto_weights(mesh, rig, **dict(project.get("weights") or {}))
        except TypeError as exc:
            raise CliError("schema", f"weight settings: {exc}") from None
    out.text(args.output, _dump(binding_doc(rig, struts, bind_frame, mesh, registration, weights)))
    if args.heatmap:
        if weights is None:
            raise CliError("usage", "--heatmap needs a mesh")
        try:
            heat = weight_heatmap(weights, args.heatmap)
        except KeyError as exc:
            raise CliError("usage", str(exc.args[0])) from None
        stem = Path(args.output).with_suffix("")
        out.text(f"{stem}.mesh.obj", save_mesh(mesh))
        out.text(f"{stem}.{args.heatmap}.heat.csv", format_heatmap(heat))
    return {"struts": len(struts), "registration_rms": None if registration is None else registration["rms"]}


def cmd_solve(args, project: Project, out: Writer) -> dict:
    sweep = _load_sweep(Path(args.input))
    ann_path = project.path("annotations", args.annotations)
    if ann_path is not None:
        anns = parse_annotations(_read_text(ann_path))
        sweep = EmaSweep(sweep.sample_rate, sweep.coil_names, sweep.positions, sweep.directions, sweep.valid,
                         tuple(anns))
    if args.binding:
        b = Binding.load(Path(args.binding))
        rig, struts = b.rig, b.struts
    else:
        rig = project.rig()
        struts = _bind_struts(project, rig, sweep, int(project.get("bind_frame", args.bind_frame)))
    settings = project.ik_settings({"max_iterations": args.max_iterations})
    missing = [s.coil_name for s in struts if s.coil_name not in sweep.coil_names]
    if missing:
        raise CliError("schema", f"sweep lacks strut coils {missing}")
    if out.dry_run:
        out.planned.append(args.output)
        return {"frames": sweep.n_frames, "struts": len(struts)}
    try:
        solves = solve_sweep(rig, struts, sweep, settings, parallel=args.parallel, workers=args.workers)
    except ValueError as exc:
        raise CliError("solve", str(exc)) from None
    report = solve_report(solves, "parallel" if args.parallel else "sequential", settings)
    action = Action(Path(args.output).stem, [s.pose for s in solves], sweep.sample_rate,
                    {"sweep": Path(args.input).name, "start_frame": 0, "end_frame": sweep.n_frames})
    out.text(args.output, format_action(action))
    out.text(args.report or f"{args.output}.report.json", dumps_report(report))
    return {"frames": len(solves), "non_converged": len(report["non_converged_frames"]),
            "mean_residual": report["mean_residual"]}


def _rig_for(args, project: Project) -> Rig:
    if getattr(args, "binding", None):
        return Binding.load(Path(args.binding)).rig
    return project.rig()


def cmd_actions(args, project: Project, out: Writer) -> dict:
    rig = _rig_for(args, project)
    action = _load_action(Path(args.input), rig)
    ann_path = _need(project.path("annotations", args.annotations), "--annotations")
    try:
        anns = parse_annotations(_read_text(ann_path))
        acts = segment_actions(action.frames, anns, action.rate, action.source.get("sweep", Path(args.input).name))
    except ValueError as exc:
        raise CliError("actions", str(exc)) from None
    for a in acts:
        out.text(Path(args.out_dir) / f"{a.name}.action", format_action(a))
    return {"actions": [a.name for a in acts]}


def _action_library(directory: Path, rig: Rig) -> dict[str, Action]:
    if not directory.is_dir():
        raise CliError("missing_file", f"no such directory: {directory}", path=str(directory))
    lib = {}
    for p in sorted(directory.glob("*.action")):
        a = _load_action(p, rig)
        lib[a.name] = a
    return lib


def cmd_timeline(args, project: Project, out: Writer) -> dict:
    rig = _rig_for(args, project)
    try:
        tl = Timeline.from_json(_read_json(Path(args.timeline)))
        lib = _action_library(Path(args.actions_dir), rig)
        action = resolve_timeline(tl, lib)
    except ValueError as exc:
        raise CliError("timeline", str(exc)) from None
    out.text(args.output, format_action(action))
    return {"frames": len(action)}


def _baked(args, project: Project):
    b = Binding.load(Path(_need(args.binding, "--binding")))
    mesh, weights = b.require_mesh()
    action = _load_action(Path(args.input), b.rig)
    stride = int(project.get("stride", args.stride))
    if stride < 1:
        raise CliError("usage", "stride must be >= 1")
    return b, mesh, weights, action, stride


def cmd_bake(args, project: Project, out: Writer) -> dict:
    b, mesh, weights, action, stride = _baked(args, project)
    n = math.ceil(len(action) / stride)
    if out.dry_run:
        out.planned.append(args.out_dir)
        return {"frames": n, "rate": action.rate / stride}
    baked = bake(action, b.rig, mesh, weights, stride)
    for i in range(len(baked)):
        out.text(Path(args.out_dir) / f"frame_{i + 1:06d}.obj", save_mesh(baked.mesh_at(i)))
    return {"frames": len(baked), "rate": baked.rate}


def cmd_export(args, project: Project, out: Writer) -> dict:
    b, mesh, weights, action, stride = _baked(args, project)
    if out.dry_run:
        out.planned.append(args.output)
        return {"frames": math.ceil(len(action) / stride)}
    baked = bake(action, b.rig, mesh, weights, stride)
    out.text(args.output, export_animation(baked))
    if args.obj_dir:
        out.planned.extend(str(p) for p in export_obj_sequence(baked, args.obj_dir))
    return {"frames": len(baked), "rate": baked.rate}


def cmd_synth(args, project: Project, out: Writer) -> dict:
    from . import synth
    from .geometry import axis_angle_matrix

    rig = project.rig()
    struts = synth.default_struts(rig, project.assignment())
    cycles = args.cycles
    sweep, truth = synth.generate_gesture(
        rig, struts, synth.ta_cycle_script(rig, cycles), args.rate,
        noise={"sigma_pos": args.sigma, "outlier_rate": args.outlier_rate, "dropout_rate": args.dropout_rate},
        seed=args.seed, annotations=synth.ta_annotations(cycles))
    d = Path(args.out_dir)
    scene = synth.default_scene()
    layout = synth.default_layout(struts)
    mesh = synth.tongue_mesh(rig)
    # store the mesh in its own "scanner" space; landmarks give the way back
    xf = SimilarityTransform(1.08, axis_angle_matrix(np.array([0.0, 0.0, 1.0]), np.radians(12.0)),
                             np.array([4.0, -3.0, 2.5]))
    inv_r = xf.rotation.T
    scanner = (mesh.vertices - xf.translation) @ inv_r.T / xf.scale
    landmarks = {k: mesh.vertices[i].tolist() for k, i in sorted(mesh.landmarks.items())}
    config = {
        "format_version": 1,
        "rig": "rig.json",
        "layout": "layout.json",
        "assignment": "assignment.json",
        "reference_pose": {k: v["position"] for k, v in scene["static_coils"].items()
                           if layout.roles.get(k) == "reference"},
        "bind_frame": synth.first_rest_hold_frame(),
        "annotations": "annotations.json",
        "mesh": "mesh.obj",
        "landmarks": "landmarks.json",
        "allow_scale": True,
        "stride": 1,
    }
    out.text(d / "project.json", _dump(config))
    out.text(d / "rig.json", _dump(rig.to_dict()))
    out.text(d / "layout.json", _dump(layout.roles))
    out.text(d / "assignment.json", _dump({s.coil_name: [s.bone_name, s.end] for s in struts}))
    out.text(d / "sweep.csv", format_sweep(sweep))
    out.text(d / "annotations.json", format_annotations(sweep.annotations) + "\n")
    out.text(d / "truth.json", json.dumps(truth.to_dict(), separators=(",", ":")) + "\n")
    out.text(d / "mesh.obj", save_mesh(mesh.with_vertices(scanner)))
    out.text(d / "landmarks.json", _dump(landmarks))
    return {"frames": sweep.n_frames, "outliers": len(truth.outliers), "dropouts": len(truth.dropouts)}


def cmd_report(args, project: Project, out: Writer) -> dict:
    summary: dict[str, Any] = {}
    if args.solve_report:
        r = _read_json(Path(args.solve_report))
        summary["solve"] = {k: r.get(k) for k in ("mode", "n_frames", "mean_residual", "max_residual",
                                                  "max_volume_deviation")}
        summary["solve"]["non_converged"] = len(r.get("non_converged_frames", []))
        summary["solve"]["non_finite"] = len(r.get("non_finite_frames", []))
    if args.action:
        rig = _rig_for(args, project)
        act = _load_action(Path(args.action), rig)
        joints = np.stack([p.joints for p in act.frames])
        steps = np.linalg.norm(np.diff(joints, axis=0), axis=2) if len(act) > 1 else np.zeros((1, 1))
        rest = np.array([rest_volume(b.name, rig) for b in rig.bones])
        vols = np.array([[bone_volume(b.name, p) for b in rig.bones] for p in act.frames])
        summary["action"] = {
            "name": act.name, "frames": len(act), "rate": act.rate,
            "finite": bool(np.isfinite(joints).all()),
            "max_step_mm": float(steps.max()),
            "stretch_min": float(min(p.stretch.min() for p in act.frames)),
            "stretch_max": float(max(p.stretch.max() for p in act.frames)),
            "max_volume_deviation": float(np.abs(vols / rest - 1.0).max()),
        }
        if args.truth:
            t = np.asarray(_read_json(Path(args.truth))["joints"], dtype=float)
            if t.shape != joints.shape:
                raise CliError("schema", f"truth has shape {t.shape}, action {joints.shape}")
            err = np.linalg.norm(joints - t, axis=2)
            summary["action"]["max_endpoint_error_mm"] = float(err.max())
            summary["action"]["mean_endpoint_error_mm"] = float(err.mean())
    if not summary:
        raise CliError("usage", "report needs --solve-report and/or --action")
    if args.output:
        out.text(args.output, _dump(summary))
    return summary


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ematongue", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="project config JSON")
    common.add_argument("--dry-run", action="store_true", help="validate inputs, write nothing")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="parse, head-correct and clean a raw sweep")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--annotations")
    s.add_argument("--report")
    s.add_argument("--rate-hint", type=float, help="sample rate if the CSV has no #rate= line")
    s.add_argument("--resample", type=float, help="target rate in Hz")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("bind", parents=[common], help="bind struts, register mesh, compute weights")
    s.add_argument("--sweep")
    s.add_argument("--mesh")
    s.add_argument("--bind-frame", type=int)
    s.add_argument("--heatmap", metavar="BONE", help="also write a per-vertex influence map for BONE")
    s.add_argument("--out", dest="output", required=True)
    s.set_defaults(func=cmd_bind)

    s = sub.add_parser("solve", parents=[common], help="solve rig poses for every frame")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--binding")
    s.add_argument("--annotations")
    s.add_argument("--bind-frame", type=int)
    s.add_argument("--max-iterations", type=int)
    s.add_argument("--report")
    s.add_argument("--parallel", action="store_true", help="solve annotation partitions in parallel")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("actions", parents=[common], help="cut a solved sweep into named actions")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--annotations")
    s.add_argument("--binding")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_actions)

    s = sub.add_parser("timeline", parents=[common], help="resolve a timeline of actions")
    s.add_argument("--timeline", required=True)
    s.add_argument("--actions-dir", required=True)
    s.add_argument("--binding")
    s.add_argument("--out", dest="output", required=True)
    s.set_defaults(func=cmd_timeline)

    s = sub.add_parser("bake", parents=[common], help="bake an action to an OBJ sequence")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--binding")
    s.add_argument("--stride", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_bake)

    s = sub.add_parser("export", parents=[common], help="export an action as animation JSON")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--binding")
    s.add_argument("--stride", type=int)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--obj-dir", help="also write the OBJ sequence here")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic project with ground truth")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--cycles", type=int, default=23)
    s.add_argument("--rate", type=float, default=200.0)
    s.add_argument("--sigma", type=float, default=0.0, help="position noise sigma, mm")
    s.add_argument("--outlier-rate", type=float, default=0.0)
    s.add_argument("--dropout-rate", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("report", parents=[common], help="summarise solve diagnostics")
    s.add_argument("--solve-report")
    s.add_argument("--action")
    s.add_argument("--binding")
    s.add_argument("--truth", help="ground-truth JSON from synth")
    s.add_argument("--out", dest="output")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        project = Project.load(args.config)
        out = Writer(args.dry_run)
        result = args.func(args, project, out)
        doc = {"command": args.command, "ok": True, "result": result}
        if args.dry_run:
            doc["dry_run"] = True
            doc["would_write"] = out.planned
        sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
        return 0
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc), **exc.extra}
    except ParseError as exc:
        err = {"error": "parse", "message": str(exc), "line": exc.line}
    except (ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
