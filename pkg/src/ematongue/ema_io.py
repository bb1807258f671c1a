"""EMA sweep ingestion: parsing, head correction, resampling and cleaning.

A sweep is stored as dense frame-major arrays (``positions[frame, coil]``)
rather than a list of per-sample objects; :meth:`EmaSweep.sample` gives the
per-sample view.

Sweep CSV layout::

    #rate=200
    frame,TT_x,TT_y,TT_z,TT_dx,TT_dy,TT_dz,TBL_x,...
    0,1.5,-2.0,3.25,0,0,1,...

Empty fields or ``nan`` mark a sample invalid.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.signal import savgol_filter

from .geometry import DegenerateGeometryError, check_non_collinear, umeyama

ROLES = ("tongue", "jaw", "lip", "reference")
_AXES = ("x", "y", "z", "dx", "dy", "dz")


class ParseError(ValueError):
    """Malformed input; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Annotation:
    label: str
    start_frame: int
    end_frame: int  # exclusive

    def __len__(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True)
class CoilSample:
    position: np.ndarray
    direction: np.ndarray
    valid: bool


@dataclass(frozen=True, eq=False)
class EmaSweep:
    sample_rate: float
    coil_names: tuple[str, ...]
    positions: np.ndarray  # (frames, coils, 3) mm
    directions: np.ndarray  # (frames, coils, 3) unit
    valid: np.ndarray  # (frames, coils) bool
    annotations: tuple[Annotation, ...] = ()

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if len(set(self.coil_names)) != len(self.coil_names):
            raise ValueError("coil names must be unique")
        n, c = self.valid.shape
        if self.positions.shape != (n, c, 3) or self.directions.shape != (n, c, 3):
            raise ValueError("sample arrays disagree in shape")
        if c != len(self.coil_names):
            raise ValueError("one sample per coil per frame required")
        for a in self.annotations:
            if not 0 <= a.start_frame < a.end_frame <= n:
                raise ValueError(f"annotation {a.label!r} outside [0, {n})")
        v = self.valid
        if v.any():
            if not np.isfinite(self.positions[v]).all() or not np.isfinite(self.directions[v]).all():
                raise ValueError("valid samples must be finite")
            norms = np.linalg.norm(self.directions[v], axis=-1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("valid directions must be unit length")

    @property
    def n_frames(self) -> int:
        return self.valid.shape[0]

    @property
    def duration(self) -> float:
        """Recording length: one sample period per frame."""
        return self.n_frames / self.sample_rate

    @property
    def span(self) -> float:
        """Time from the first to the last sample."""
        return (self.n_frames - 1) / self.sample_rate

    def coil_index(self, name: str) -> int:
        try:
            return self.coil_names.index(name)
        except ValueError:
            raise KeyError(f"unknown coil {name!r}") from None

    def sample(self, frame: int, coil: str) -> CoilSample:
        c = self.coil_index(coil)
        return CoilSample(self.positions[frame, c].copy(), self.directions[frame, c].copy(), bool(self.valid[frame, c]))

    def frame(self, frame: int) -> dict[str, CoilSample]:
        return {name: self.sample(frame, name) for name in self.coil_names}


@dataclass(frozen=True)
class CoilLayout:
    entries: tuple[tuple[str, str], ...]

    def __post_init__(self):
        for name, role in self.entries:
            if role not in ROLES:
                raise ValueError(f"coil {name!r}: unknown role {role!r}")

    @property
    def roles(self) -> dict[str, str]:
        return dict(self.entries)

    @property
    def reference_names(self) -> list[str]:
        return [n for n, r in self.entries if r == "reference"]

    def names_with_role(self, role: str) -> list[str]:
        return [n for n, r in self.entries if r == role]

    def check_covers(self, sweep: EmaSweep) -> None:
        missing = [n for n in sweep.coil_names if n not in self.roles]
        if missing:
            raise ValueError(f"layout has no role for coils {missing}")


@dataclass(frozen=True, eq=False)
class PalateTrace:
    points: np.ndarray


# --------------------------------------------------------------------- parsing


def parse_sweep(text: str, sample_rate: float | None = None) -> EmaSweep:
    """Parse the sweep CSV format.

    ``sample_rate`` overrides the ``#rate=`` line; one of the two is required.
    """
    lines = text.splitlines()
    idx = 0
    rate = None
    if lines and lines[0].startswith("#"):
        head = lines[0][1:].strip()
        if not head.startswith("rate="):
            raise ParseError("expected '#rate=<Hz>'", 1)
        try:
            rate = float(head[5:])
        except ValueError:
            raise ParseError(f"bad rate {head[5:]!r}", 1) from None
        idx = 1
    if sample_rate is not None:
        rate = float(sample_rate)
    if rate is None:
        raise ParseError("sample rate missing", 1)
    if not (math.isfinite(rate) and rate > 0):
        raise ParseError(f"non-positive sample rate {rate}", 1)
    if idx >= len(lines):
        raise ParseError("missing header", idx + 1)
    header_line = idx + 1
    cols = [c.strip() for c in lines[idx].split(",")]
    if not cols or cols[0] != "frame":
        raise ParseError("header must start with 'frame'", header_line)
    if (len(cols) - 1) % 6 != 0 or len(cols) == 1:
        raise ParseError("header needs 6 columns per coil", header_line)
    names: list[str] = []
    for k in range(1, len(cols), 6):
        group = cols[k : k + 6]
        name = group[0].rsplit("_", 1)[0]
        expected = [f"{name}_{a}" for a in _AXES]
        if group != expected:
            raise ParseError(f"columns {group} do not match {expected}", header_line)
        names.append(name)
    if len(set(names)) != len(names):
        raise ParseError("duplicate coil name in header", header_line)

    rows = []
    for lineno, line in enumerate(lines[idx + 1 :], start=idx + 2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != len(cols):
            raise ParseError(f"expected {len(cols)} fields, got {len(fields)}", lineno)
        try:
            int(fields[0])
        except ValueError:
            raise ParseError(f"bad frame index {fields[0]!r}", lineno) from None
        try:
            rows.append([float(f) if f.strip() else math.nan for f in fields[1:]])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    if not rows:
        raise ParseError("no data rows", header_line + 1)

    data = np.asarray(rows, dtype=float).reshape(len(rows), len(names), 6)
    pos = data[..., :3].copy()
    dirs = data[..., 3:].copy()
    norms = np.linalg.norm(dirs, axis=-1)
    valid = np.isfinite(pos).all(-1) & np.isfinite(dirs).all(-1) & (norms > 1e-9)
    dirs[valid] /= norms[valid][:, None]
    return EmaSweep(rate, tuple(names), pos, dirs, valid)


def _fmt(x: float) -> str:
    return repr(float(x))


def format_sweep(sweep: EmaSweep) -> str:
    """Serialise a sweep; invalid samples become empty fields."""
    out = [f"#rate={_fmt(sweep.sample_rate)}"]
    header = ["frame"]
    for name in sweep.coil_names:
        header += [f"{name}_{a}" for a in _AXES]
    out.append(",".join(header))
    empty = ",".join([""] * 6)
    for f in range(sweep.n_frames):
        parts = [str(f)]
        for c in range(len(sweep.coil_names)):
            if sweep.valid[f, c]:
                parts.append(",".join(_fmt(v) for v in (*sweep.positions[f, c], *sweep.directions[f, c])))
            else:
                parts.append(empty)
        out.append(",".join(parts))
    return "\n".join(out) + "\n"


def parse_palate(text: str) -> PalateTrace:
    pts = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 3:
            raise ParseError("expected 'x y z'", lineno)
        try:
            pts.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    if len(pts) < 3:
        raise ParseError("insufficient points")
    arr = np.asarray(pts)
    if not np.isfinite(arr).all():
        raise ParseError("non-finite palate point")
    try:
        check_non_collinear(arr)
    except DegenerateGeometryError:
        raise ParseError("palate points are collinear") from None
    return PalateTrace(arr)


def parse_layout(text: str) -> CoilLayout:
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ParseError("layout must be a JSON object mapping coil name to role")
    return CoilLayout(tuple((str(k), str(v)) for k, v in doc.items()))


def parse_annotations(text: str) -> list[Annotation]:
    doc = json.loads(text)
    if not isinstance(doc, list):
        raise ParseError("annotations must be a JSON list")
    out = []
    for item in doc:
        try:
            out.append(Annotation(str(item["label"]), int(item["start_frame"]), int(item["end_frame"])))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"bad annotation entry {item!r}: {exc}") from None
    return out


def format_annotations(annotations: Iterable[Annotation]) -> str:
    return json.dumps(
        [{"label": a.label, "start_frame": a.start_frame, "end_frame": a.end_frame} for a in annotations], indent=1
    )


# -------------------------------------------------------------- head correction


@dataclass
class HeadCorrectionReport:
    residual_rms: np.ndarray  # per frame, mm
    flagged_frames: list[int] = field(default_factory=list)
    borrowed_from: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "residual_rms_mean": float(np.nanmean(self.residual_rms)) if len(self.residual_rms) else 0.0,
            "residual_rms_max": float(np.nanmax(self.residual_rms)) if len(self.residual_rms) else 0.0,
            "flagged_frames": self.flagged_frames,
            "borrowed_from": {str(k): v for k, v in self.borrowed_from.items()},
        }


def head_correct(
    sweep: EmaSweep, layout: CoilLayout, reference_pose: Mapping[str, Sequence[float]]
) -> tuple[EmaSweep, HeadCorrectionReport]:
    """Remove head motion by aligning reference coils onto ``reference_pose``.

    Each frame gets the least-squares rigid transform taking the measured
    reference positions onto the fixed head frame; it is applied to every coil
    position and direction.  Frames with fewer than three valid reference
    coils borrow the transform of the nearest good frame and are flagged.
    """
    refs = [n for n in layout.reference_names if n in sweep.coil_names]
    if len(refs) < 3:
        raise ValueError("head correction needs at least 3 reference coils")
    missing = [n for n in refs if n not in reference_pose]
    if missing:
        raise ValueError(f"reference pose lacks coils {missing}")
    target = np.array([reference_pose[n] for n in refs], dtype=float)
    try:
        check_non_collinear(target)
    except DegenerateGeometryError:
        raise DegenerateGeometryError("reference pose coils are collinear") from None
    ridx = [sweep.coil_index(n) for n in refs]

    n = sweep.n_frames
    rots = np.full((n, 3, 3), np.nan)
    trans = np.full((n, 3), np.nan)
    rms = np.full(n, np.nan)
    good = np.zeros(n, dtype=bool)
    for f in range(n):
        ok = sweep.valid[f, ridx]
        if ok.sum() < 3:
            continue
        src = sweep.positions[f, ridx][ok]
        dst = target[ok]
        try:
            _, r, t = umeyama(src, dst, with_scale=False)
        except DegenerateGeometryError:
            raise DegenerateGeometryError(f"frame {f}: reference coils are collinear") from None
        rots[f], trans[f], good[f] = r, t, True
        rms[f] = float(np.sqrt(((src @ r.T + t - dst) ** 2).sum(-1).mean()))

    if not good.any():
        raise ValueError("no frame has 3 valid reference coils")
    report = HeadCorrectionReport(rms)
    good_idx = np.flatnonzero(good)
    for f in np.flatnonzero(~good):
        src = int(good_idx[np.argmin(np.abs(good_idx - f))])
        rots[f], trans[f] = rots[src], trans[src]
        report.flagged_frames.append(int(f))
        report.borrowed_from[int(f)] = src

    pos = np.einsum("fij,fcj->fci", rots, sweep.positions) + trans[:, None, :]
    dirs = np.einsum("fij,fcj->fci", rots, sweep.directions)
    pos[~sweep.valid] = sweep.positions[~sweep.valid]
    dirs[~sweep.valid] = sweep.directions[~sweep.valid]
    return replace(sweep, positions=pos, directions=dirs, valid=sweep.valid.copy()), report


# ------------------------------------------------------------------ resampling


def _nlerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    v = a + (b - a) * t[..., None]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return v / n


def resample(sweep: EmaSweep, target_rate: float) -> EmaSweep:
    """Linear (positions) and normalised-linear (directions) resampling."""
    if not target_rate > 0:
        raise ValueError("target_rate must be positive")
    if target_rate == sweep.sample_rate:
        return replace(sweep)
    n_out = int(math.floor(sweep.span * target_rate + 1e-9)) + 1
    src = np.arange(n_out) * (sweep.sample_rate / target_rate)
    snapped = np.round(src)
    exact = np.abs(src - snapped) < 1e-9
    src = np.where(exact, snapped, src)
    src = np.minimum(src, sweep.n_frames - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, sweep.n_frames - 1)
    t = src - lo

    p_lo, p_hi = sweep.positions[lo], sweep.positions[hi]
    d_lo, d_hi = sweep.directions[lo], sweep.directions[hi]
    pos = p_lo + (p_hi - p_lo) * t[:, None, None]
    dirs = _nlerp(d_lo, d_hi, np.broadcast_to(t[:, None], pos.shape[:2]))
    valid = sweep.valid[lo] & (sweep.valid[hi] | (t == 0.0)[:, None])
    # coincident timestamps copy the source sample bit for bit
    pos[exact] = sweep.positions[lo[exact]]
    dirs[exact] = sweep.directions[lo[exact]]
    valid[exact] = sweep.valid[lo[exact]]
    bad = valid & ~(np.isfinite(dirs).all(-1) & np.isfinite(pos).all(-1))
    valid &= ~bad

    scale = target_rate / sweep.sample_rate
    anns = []
    for a in sweep.annotations:
        s = min(int(round(a.start_frame * scale)), n_out - 1)
        e = max(min(int(round(a.end_frame * scale)), n_out), s + 1)
        anns.append(Annotation(a.label, s, e))
    return EmaSweep(float(target_rate), sweep.coil_names, pos, dirs, valid, tuple(anns))


# -------------------------------------------------------------------- cleaning


@dataclass(frozen=True)
class CleanEvent:
    coil: str
    start_frame: int
    end_frame: int  # exclusive
    reason: str  # speed | median | filled | smoothed | unfilled | unrepairable

    def to_dict(self) -> dict:
        return {"coil": self.coil, "start_frame": self.start_frame, "end_frame": self.end_frame, "reason": self.reason}


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open ``(start, end)`` runs of True in a 1-D mask."""
    if not mask.any():
        return []
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(m)
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def noise_sigma(pos: np.ndarray, valid: np.ndarray) -> float:
    """Robust white-noise level (mm) of one coil track.

    MAD of third differences over fully valid stretches, scaled to a
    Gaussian sigma; smooth motion contributes almost nothing.  Largest axis.
    """
    ok = valid[:-3] & valid[1:-2] & valid[2:-1] & valid[3:]
    if ok.sum() < 8:
        return 0.0
    d3 = np.diff(pos, 3, axis=0)[ok]
    mad = np.median(np.abs(d3 - np.median(d3, axis=0)), axis=0)
    return float((1.4826 * mad / np.sqrt(20.0)).max())


def _speed_outliers(pos: np.ndarray, valid: np.ndarray, rate: float, max_speed: float) -> np.ndarray:
    """Samples too fast relative to *both* of their two nearest valid neighbours.

    Interior samples are compared with the previous and next valid sample;
    samples at either end use the two nearest valid samples on their only
    side.  A one-frame spike is caught, its neighbours are not.
    """
    idx = np.flatnonzero(valid)
    out = np.zeros(len(valid), dtype=bool)
    if len(idx) < 3:
        return out
    p = pos[idx]
    for k in range(len(idx)):
        if k == 0:
            nb = (1, 2)
        elif k == len(idx) - 1:
            nb = (k - 1, k - 2)
        else:
            nb = (k - 1, k + 1)
        fast = True
        for j in nb:
            dt = abs(int(idx[j]) - int(idx[k])) / rate
            if np.linalg.norm(p[j] - p[k]) / dt <= max_speed:
                fast = False
                break
        out[idx[k]] = fast
    return out


def clean(
    sweep: EmaSweep,
    max_speed: float = 1000.0,
    median_window: int = 7,
    median_tolerance: float = 0.25,
    smooth_window: int = 9,
    noise_floor: float = 0.02,
) -> tuple[EmaSweep, list[CleanEvent]]:
    """Flag and repair implausible coil samples.

    Per coil: samples moving faster than ``max_speed`` (mm/s) relative to both
    neighbours are invalidated; valid samples further than
    ``median_tolerance`` mm from the sliding median of their
    ``median_window`` neighbourhood (narrower, still centred, near the ends)
    are replaced by that median; invalid runs shorter than ``median_window``
    are bridged by linear interpolation (normalised for directions), or held
    at either end of the sweep.  Finally, coils whose estimated noise exceeds
    ``noise_floor`` mm are smoothed with a cubic Savitzky-Golay filter of
    ``smooth_window`` frames (positions and directions) over every valid run
    at least that long; ``smooth_window=0`` disables this.  Every altered
    sample is covered by an event in the returned report; nothing else
    changes.
    """
    if median_window < 3 or median_window % 2 == 0:
        raise ValueError("median_window must be odd and >= 3")
    if smooth_window and (smooth_window < 5 or smooth_window % 2 == 0):
        raise ValueError("smooth_window must be 0 or odd and >= 5")
    pos = sweep.positions.copy()
    dirs = sweep.directions.copy()
    valid = sweep.valid.copy()
    events: list[CleanEvent] = []
    half = median_window // 2
    n = sweep.n_frames

    for c, name in enumerate(sweep.coil_names):
        v = valid[:, c]
        if not v.any():
            events.append(CleanEvent(name, 0, n, "unrepairable"))
            continue
        fast = _speed_outliers(pos[:, c], v, sweep.sample_rate, max_speed)
        for s, e in _runs(fast):
            events.append(CleanEvent(name, s, e, "speed"))
        v = v & ~fast

        # sliding median over surviving samples; computed from unmodified input
        src = pos[:, c].copy()
        changed = np.zeros(n, dtype=bool)
        for f in np.flatnonzero(v):
            # window shrinks symmetrically at the ends so smooth ramps are never flagged
            h = min(half, f, n - 1 - f)
            lo, hi = f - h, f + h + 1
            win = src[lo:hi][v[lo:hi]]
            med = np.median(win, axis=0)
            if np.linalg.norm(src[f] - med) > median_tolerance:
                pos[f, c] = med
                changed[f] = True
        for s, e in _runs(changed):
            events.append(CleanEvent(name, s, e, "median"))

        for s, e in _runs(~v):
            if e - s >= median_window or (s == 0 and e == n):
                events.append(CleanEvent(name, s, e, "unfilled"))
                continue
            a, b = s - 1, e
            if s == 0 or e == n:
                # short run at an end of the sweep: hold the nearest valid sample
                src_f = b if s == 0 else a
                pos[s:e, c] = pos[src_f, c]
                dirs[s:e, c] = dirs[src_f, c]
                v[s:e] = True
                events.append(CleanEvent(name, s, e, "filled"))
                continue
            t = (np.arange(s, e) - a) / (b - a)
            pos[s:e, c] = pos[a, c] + (pos[b, c] - pos[a, c]) * t[:, None]
            dirs[s:e, c] = _nlerp(np.broadcast_to(dirs[a, c], (e - s, 3)), np.broadcast_to(dirs[b, c], (e - s, 3)), t)
            v[s:e] = True
            events.append(CleanEvent(name, s, e, "filled"))
        valid[:, c] = v

        if smooth_window and noise_sigma(pos[:, c], v) > noise_floor:
            for s, e in _runs(v):
                if e - s < smooth_window:
                    continue
                pos[s:e, c] = savgol_filter(pos[s:e, c], smooth_window, 3, axis=0)
                d = savgol_filter(dirs[s:e, c], smooth_window, 3, axis=0)
                dirs[s:e, c] = d / np.linalg.norm(d, axis=1, keepdims=True)
                events.append(CleanEvent(name, s, e, "smoothed"))

    cleaned = replace(sweep, positions=pos, directions=dirs, valid=valid)
    return cleaned, events
