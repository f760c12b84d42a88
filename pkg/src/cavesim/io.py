"""JSON documents for rigs, faults, scenes, trajectories and reports.

Every input document carries a ``unit`` field ("m", "ft" or "in"); lengths
are converted to metres on load and everything is written back in metres.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np
import jsonschema

from .calib import DistortionGrid
from .errors import ConfigurationError
from .geom import Pose, ScreenRect, quat_from_axis_angle
from .rig import FaultSet, RigConfig, Scene, ScreenFaults, Trajectory, cave

UNIT_SCALE = {"m": 1.0, "ft": 0.3048, "in": 0.0254}
REPORT_SCHEMA_VERSION = "1.0"


def unit_scale(doc: dict) -> float:
    unit = doc.get("unit")
    if unit is None:
        raise ConfigurationError("missing (expected one of m, ft, in)", "unit")
    if unit not in UNIT_SCALE:
        raise ConfigurationError(f"unknown unit {unit!r} (expected one of m, ft, in)", "unit")
    return UNIT_SCALE[unit]


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return doc


def _check_keys(doc, allowed, where):
    extra = sorted(set(doc) - set(allowed))
    if extra:
        raise ConfigurationError(f"unknown field(s) {extra}", where)


def _length3(doc, key, scale, where, default=None):
    if key not in doc:
        if default is None:
            raise ConfigurationError("missing", f"{where}{key}")
        return np.asarray(default, dtype=float)
    try:
        v = np.asarray(doc[key], dtype=float)
    except (TypeError, ValueError):
        raise ConfigurationError("expected three numbers", f"{where}{key}") from None
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ConfigurationError("expected three finite numbers", f"{where}{key}")
    return v * scale


def _number(doc, key, where, default, scale=1.0):
    v = doc.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigurationError("expected a number", f"{where}{key}")
    return float(v) * scale


def _grid(doc, scale, where):
    if not isinstance(doc, dict):
        raise ConfigurationError("expected a grid object", where)
    g_scale = UNIT_SCALE.get(doc.get("unit"), None) if "unit" in doc else scale
    if g_scale is None:
        raise ConfigurationError(f"unknown unit {doc.get('unit')!r}", f"{where}.unit")
    try:
        return DistortionGrid.from_dict(doc, g_scale)
    except ConfigurationError as exc:
        raise ConfigurationError(str(exc), where) from None
    except ValueError as exc:
        raise ConfigurationError(str(exc), where) from None


# -- rig -----------------------------------------------------------------------

RIG_KEYS = ("unit", "preset", "side", "pixels", "screens", "interior_point", "ipd",
            "glasses_offset", "frame_rate_hz", "tracker_correction")


def rig_from_dict(doc: dict) -> RigConfig:
    scale = unit_scale(doc)
    _check_keys(doc, RIG_KEYS, "rig")
    kw = {
        "ipd": _number(doc, "ipd", "", 0.065 / scale, scale),
        "glasses_offset": _length3(doc, "glasses_offset", scale, "", (0, 0, 0)),
        "frame_rate_hz": _number(doc, "frame_rate_hz", "", 60.0),
        "unit": doc["unit"],
    }
    if doc.get("tracker_correction") is not None:
        kw["tracker_correction"] = _grid(doc["tracker_correction"], scale, "tracker_correction")
    if "interior_point" in doc:
        kw["interior_point"] = _length3(doc, "interior_point", scale, "")
    preset = doc.get("preset")
    if preset is not None:
        if preset != "cave":
            raise ConfigurationError(f"unknown preset {preset!r}", "preset")
        pixels = doc.get("pixels", 1024)
        if not isinstance(pixels, int) or pixels <= 0:
            raise ConfigurationError("expected a positive integer", "pixels")
        return cave(_number(doc, "side", "", 3.0 / scale, scale), pixels, **kw)
    screens = doc.get("screens")
    if not isinstance(screens, list) or not screens:
        raise ConfigurationError("expected a non-empty list (or \"preset\": \"cave\")", "screens")
    rects = []
    for i, sd in enumerate(screens):
        where = f"screens[{i}]."
        if not isinstance(sd, dict):
            raise ConfigurationError("expected an object", f"screens[{i}]")
        _check_keys(sd, ("name", "lower_left", "lower_right", "upper_left", "pixels_w",
                         "pixels_h"), f"screens[{i}]")
        try:
            rects.append(ScreenRect(_length3(sd, "lower_left", scale, where),
                                    _length3(sd, "lower_right", scale, where),
                                    _length3(sd, "upper_left", scale, where),
                                    sd.get("pixels_w", 1024), sd.get("pixels_h", 1024),
                                    str(sd.get("name", f"screen{i}"))))
        except ConfigurationError as exc:
            raise ConfigurationError(str(exc), f"screens[{i}]") from None
    if "interior_point" not in kw:
        raise ConfigurationError("missing", "interior_point")
    return RigConfig(rects, **kw)


def rig_to_dict(rig: RigConfig) -> dict:
    return {
        "unit": "m",
        "screens": [{"name": s.name, "lower_left": s.lower_left.tolist(),
                     "lower_right": s.lower_right.tolist(), "upper_left": s.upper_left.tolist(),
                     "pixels_w": s.pixels_w, "pixels_h": s.pixels_h} for s in rig.screens],
        "interior_point": rig.interior_point.tolist(),
        "ipd": rig.ipd,
        "glasses_offset": rig.glasses_offset.tolist(),
        "frame_rate_hz": rig.frame_rate_hz,
        "tracker_correction": (rig.tracker_correction.to_dict()
                               if rig.tracker_correction is not None else None),
    }


# -- faults --------------------------------------------------------------------

FAULT_KEYS = ("unit", "tracker_offset", "distortion", "jitter_sigma", "latency_s", "screens")
SCREEN_FAULT_KEYS = ("eye_swap", "genlock_break_row", "projector_affine", "color_gain",
                     "ghost_leak", "plane_shift")


def faults_from_dict(doc: dict) -> FaultSet:
    scale = unit_scale(doc)
    _check_keys(doc, FAULT_KEYS, "faults")
    screens = {}
    for name, sd in (doc.get("screens") or {}).items():
        where = f"screens.{name}"
        if not isinstance(sd, dict):
            raise ConfigurationError("expected an object", where)
        _check_keys(sd, SCREEN_FAULT_KEYS, where)
        kw = {}
        if "eye_swap" in sd:
            if not isinstance(sd["eye_swap"], bool):
                raise ConfigurationError("expected true or false", f"{where}.eye_swap")
            kw["eye_swap"] = sd["eye_swap"]
        if sd.get("genlock_break_row") is not None:
            row = sd["genlock_break_row"]
            if isinstance(row, bool) or not isinstance(row, int):
                raise ConfigurationError("expected an integer row", f"{where}.genlock_break_row")
            kw["genlock_break_row"] = row
        if "projector_affine" in sd:
            try:
                a = np.array(sd["projector_affine"], dtype=float)
            except (TypeError, ValueError):
                raise ConfigurationError("expected a 2x3 matrix", f"{where}.projector_affine") from None
            if a.shape != (2, 3):
                raise ConfigurationError("expected a 2x3 matrix", f"{where}.projector_affine")
            a[:, 2] *= scale
            kw["projector_affine"] = a
        if "color_gain" in sd:
            kw["color_gain"] = sd["color_gain"]
        if "ghost_leak" in sd:
            kw["ghost_leak"] = _number(sd, "ghost_leak", f"{where}.", 0.0)
        if "plane_shift" in sd:
            kw["plane_shift"] = _number(sd, "plane_shift", f"{where}.", 0.0, scale)
        try:
            screens[name] = ScreenFaults(**kw)
        except ConfigurationError as exc:
            raise ConfigurationError(str(exc), where) from None
    distortion = None
    if doc.get("distortion") is not None:
        distortion = _grid(doc["distortion"], scale, "distortion")
    return FaultSet(
        tracker_offset=_length3(doc, "tracker_offset", scale, "", (0, 0, 0)),
        distortion=distortion,
        jitter_sigma=_number(doc, "jitter_sigma", "", 0.0, scale),
        latency_s=_number(doc, "latency_s", "", 0.0),
        screens=screens,
    )


def faults_to_dict(faults: FaultSet) -> dict:
    screens = {}
    for name, sf in sorted(faults.screens.items()):
        screens[name] = {
            "eye_swap": sf.eye_swap,
            "genlock_break_row": sf.genlock_break_row,
            "projector_affine": sf.projector_affine.tolist(),
            "color_gain": list(sf.color_gain),
            "ghost_leak": sf.ghost_leak,
            "plane_shift": sf.plane_shift,
        }
    return {
        "unit": "m",
        "tracker_offset": faults.tracker_offset.tolist(),
        "distortion": faults.distortion.to_dict() if faults.distortion is not None else None,
        "jitter_sigma": faults.jitter_sigma,
        "latency_s": faults.latency_s,
        "screens": screens,
    }


# -- scene and trajectory --------------------------------------------------------

def scene_from_dict(doc: dict) -> Scene:
    scale = unit_scale(doc)
    _check_keys(doc, ("unit", "probes", "segments", "segment_samples", "wand_marker",
                      "ground_plane"), "scene")
    probes = {k: _length3({k: v}, k, scale, "probes.") for k, v in (doc.get("probes") or {}).items()}
    segments = {}
    for k, v in (doc.get("segments") or {}).items():
        if not isinstance(v, list) or len(v) != 2:
            raise ConfigurationError("expected [start, end]", f"segments.{k}")
        segments[k] = (_length3({"a": v[0]}, "a", scale, f"segments.{k}."),
                       _length3({"b": v[1]}, "b", scale, f"segments.{k}."))
    return Scene(probes, segments, int(doc.get("segment_samples", 2)),
                 bool(doc.get("wand_marker", False)), bool(doc.get("ground_plane", False)))


def _pose(doc, scale, where):
    if isinstance(doc, list):
        return Pose(np.asarray(doc, dtype=float) * scale)
    if not isinstance(doc, dict):
        raise ConfigurationError("expected a position or {position, yaw_deg}", where)
    pos = _length3(doc, "position", scale, f"{where}.")
    yaw = _number(doc, "yaw_deg", f"{where}.", 0.0)
    return Pose(pos, quat_from_axis_angle((0, 1, 0), np.radians(yaw)))


def trajectory_from_dict(doc: dict) -> Trajectory:
    scale = unit_scale(doc)
    kind = doc.get("kind", "static")
    head = _pose(doc.get("head", [0.0, 1.5 / scale, 0.0]), scale, "head")
    duration = _number(doc, "duration", "", 1.0)
    if kind == "static":
        wand = _pose(doc["wand"], scale, "wand") if "wand" in doc else None
        return Trajectory.static(head, wand, duration)
    if kind == "linear":
        return Trajectory.linear(head, _length3(doc, "velocity", scale, ""), None, duration)
    if kind == "wag":
        return Trajectory.wag(head, _length3(doc, "center", scale, ""),
                              _length3(doc, "axis", 1.0, "", (1, 0, 0)),
                              _number(doc, "amplitude", "", 0.3 / scale, scale),
                              _number(doc, "frequency", "", 1.0), duration)
    if kind == "circle":
        return Trajectory.circle(head, _length3(doc, "center", scale, ""),
                                 _number(doc, "radius", "", 0.3 / scale, scale),
                                 _number(doc, "speed", "", 0.5 / scale, scale),
                                 _length3(doc, "normal", 1.0, "", (0, 0, 1)), duration)
    raise ConfigurationError(f"unknown kind {kind!r} (static, linear, wag, circle)", "kind")


# -- digests, reports, atomic output ------------------------------------------------

def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_rig(rig: RigConfig) -> str:
    return sha256_hex(canonical_json(rig_to_dict(rig)))


def digest_faults(faults: FaultSet) -> str:
    return sha256_hex(canonical_json(faults_to_dict(faults)))


_ESTIMATE = {"type": "object", "required": ["value", "unit"],
             "properties": {"unit": {"type": "string"}}}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "tool_version", "seed", "rig_digest", "faults_digest",
                 "summary", "findings"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "tool_version": {"type": "string"},
        "seed": {"type": "integer"},
        "rig_digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "faults_digest": {"type": ["string", "null"]},
        "summary": {
            "type": "object",
            "required": ["pass", "fail", "inconclusive"],
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
        "findings": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["test_name", "status", "estimates", "evidence", "threshold", "notes"],
                "properties": {
                    "test_name": {"type": "string"},
                    "status": {"enum": ["pass", "fail", "inconclusive"]},
                    "screen": {"type": ["string", "null"]},
                    "estimates": {"type": "object", "additionalProperties": _ESTIMATE},
                    "threshold": {"type": "object", "additionalProperties": _ESTIMATE},
                    "evidence": {"type": "array", "items": {"type": "string"}},
                    "notes": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
    },
}


def validate_report(doc: dict) -> None:
    jsonschema.validate(doc, REPORT_SCHEMA)


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_atomic(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
