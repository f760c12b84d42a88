"""Simulated projection VR system with fault injection.

The pipeline per frame: the tracker reports head and wand poses (faults
applied in the fixed order latency, distortion grid, constant offset,
jitter), the software applies its optional correction table, derives the
eyes, and for every screen renders each eye's view through the screen it
*believes* in (shifted by ``plane_shift``).  The projector then applies its
affine error in screen space, and a screen with swapped eye views exchanges
its two point lists last.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import geom
from .calib import DistortionGrid, trilinear_sample
from .errors import ConfigurationError
from .geom import Pose, ScreenPoint, ScreenRect, vec3

CLIP_MARGIN = 0.10
EYES = ("left", "right")
SENSORS = ("head", "wand")


@dataclass
class RigConfig:
    screens: list
    interior_point: np.ndarray = (0.0, 1.5, 0.0)
    ipd: float = 0.065
    glasses_offset: np.ndarray = (0.0, 0.0, 0.0)
    frame_rate_hz: float = 60.0
    unit: str = "m"
    # software-side lookup table applied to every reported position
    tracker_correction: DistortionGrid | None = None

    def __post_init__(self):
        self.interior_point = vec3(self.interior_point, "interior_point")
        self.glasses_offset = vec3(self.glasses_offset, "glasses_offset")
        if not self.screens:
            raise ConfigurationError("at least one screen is required", "screens")
        if not self.ipd > 0:
            raise ConfigurationError("must be positive", "ipd")
        if not self.frame_rate_hz > 0:
            raise ConfigurationError("must be positive", "frame_rate_hz")
        names = [s.name for s in self.screens]
        if len(set(names)) != len(names):
            raise ConfigurationError("screen names must be unique", "screens")
        for s in self.screens:
            geom.screen_basis(s, self.interior_point)

    def screen(self, name: str) -> ScreenRect:
        for s in self.screens:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def screen_names(self) -> list[str]:
        return [s.name for s in self.screens]


def cave(side: float = 3.0, pixels: int = 1024, **kw) -> RigConfig:
    """Four-sided CAVE (front, left, right, floor) of edge ``side``, with the
    origin at the floor centre and the front wall at z = -side/2."""
    h = side / 2.0
    screens = [
        ScreenRect((-h, 0, -h), (h, 0, -h), (-h, side, -h), pixels, pixels, "front"),
        ScreenRect((-h, 0, h), (-h, 0, -h), (-h, side, h), pixels, pixels, "left"),
        ScreenRect((h, 0, -h), (h, 0, h), (h, side, -h), pixels, pixels, "right"),
        ScreenRect((-h, 0, h), (h, 0, h), (-h, 0, -h), pixels, pixels, "floor"),
    ]
    kw.setdefault("interior_point", (0.0, h, 0.0))
    return RigConfig(screens, **kw)


IDENTITY_AFFINE = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass
class ScreenFaults:
    eye_swap: bool = False
    genlock_break_row: int | None = None
    projector_affine: np.ndarray = field(default_factory=lambda: IDENTITY_AFFINE.copy())
    color_gain: tuple = (1.0, 1.0, 1.0)
    ghost_leak: float = 0.0
    plane_shift: float = 0.0

    def __post_init__(self):
        self.projector_affine = np.asarray(self.projector_affine, dtype=float)
        if self.projector_affine.shape != (2, 3) or not np.all(np.isfinite(self.projector_affine)):
            raise ConfigurationError("must be a finite 2x3 matrix", "projector_affine")
        if abs(np.linalg.det(self.projector_affine[:, :2])) < 1e-12:
            raise ConfigurationError("singular affine", "projector_affine")
        self.color_gain = tuple(float(g) for g in self.color_gain)
        if len(self.color_gain) != 3 or min(self.color_gain) < 0:
            raise ConfigurationError("need three non-negative gains", "color_gain")
        if not 0.0 <= self.ghost_leak < 1.0:
            raise ConfigurationError("must be in [0, 1)", "ghost_leak")
        if self.genlock_break_row is not None and self.genlock_break_row < 0:
            raise ConfigurationError("must be non-negative", "genlock_break_row")
        if not math.isfinite(self.plane_shift):
            raise ConfigurationError("must be finite", "plane_shift")

    @property
    def affine_is_identity(self) -> bool:
        return bool(np.array_equal(self.projector_affine, IDENTITY_AFFINE))


@dataclass
class FaultSet:
    tracker_offset: np.ndarray = (0.0, 0.0, 0.0)
    distortion: DistortionGrid | None = None
    jitter_sigma: float = 0.0
    latency_s: float = 0.0
    screens: dict = field(default_factory=dict)  # name -> ScreenFaults

    def __post_init__(self):
        self.tracker_offset = vec3(self.tracker_offset, "tracker_offset")
        if not self.jitter_sigma >= 0:
            raise ConfigurationError("must be >= 0", "jitter_sigma")
        if not self.latency_s >= 0:
            raise ConfigurationError("must be >= 0", "latency_s")

    def for_screen(self, name: str) -> ScreenFaults:
        sf = self.screens.get(name)
        return sf if sf is not None else _NO_SCREEN_FAULTS

    def validate_against(self, rig: RigConfig) -> None:
        for name, sf in self.screens.items():
            try:
                s = rig.screen(name)
            except KeyError:
                raise ConfigurationError("no such screen in rig", f"screens.{name}") from None
            row = sf.genlock_break_row
            if row is not None and not 0 <= row < s.pixels_h:
                raise ConfigurationError(f"must lie in [0, {s.pixels_h})",
                                         f"screens.{name}.genlock_break_row")


_NO_SCREEN_FAULTS = ScreenFaults()


# -- deterministic jitter ----------------------------------------------------

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class JitterSource:
    """Gaussian samples keyed by (seed, sensor name, time).

    Each sensor owns an independent stream, and a sample depends only on its
    key, so frames can be generated in any order with identical results.
    """

    def __init__(self, seed: int, sensor: str):
        _, self._base = splitmix64((int(seed) & _MASK) ^ (zlib.crc32(sensor.encode()) << 32))

    def normal3(self, t: float) -> np.ndarray:
        key = struct.unpack("<Q", struct.pack("<d", float(t)))[0]
        state, _ = splitmix64(self._base ^ key)
        out = []
        while len(out) < 3:
            state, a = splitmix64(state)
            state, b = splitmix64(state)
            u1 = ((a >> 11) + 1) / 9007199254740993.0  # (0, 1]
            u2 = (b >> 11) / 9007199254740992.0
            r = math.sqrt(-2.0 * math.log(u1))
            out += [r * math.cos(2 * math.pi * u2), r * math.sin(2 * math.pi * u2)]
        return np.array(out[:3])


# -- scene and trajectories --------------------------------------------------

@dataclass
class Scene:
    probes: dict = field(default_factory=dict)    # label -> Vec3
    segments: dict = field(default_factory=dict)  # label -> (Vec3, Vec3)
    segment_samples: int = 2
    wand_marker: bool = False
    ground_plane: bool = False

    def __post_init__(self):
        self.probes = {k: vec3(v, f"probes.{k}") for k, v in self.probes.items()}
        self.segments = {k: (vec3(a, f"segments.{k}"), vec3(b, f"segments.{k}"))
                         for k, (a, b) in self.segments.items()}
        if self.segment_samples < 2:
            raise ConfigurationError("must be >= 2", "segment_samples")
        labels = list(self.probes) + list(self.segments) + (["wand"] if self.wand_marker else [])
        if len(set(labels)) != len(labels):
            raise ConfigurationError("labels must be unique", "scene")

    def static_points(self):
        labels, pts = [], []
        for k, p in self.probes.items():
            labels.append(k)
            pts.append(p)
        n = self.segment_samples
        for k, (a, b) in self.segments.items():
            for i in range(n):
                labels.append(f"{k}#{i}")
                pts.append(a + (b - a) * (i / (n - 1)))
        return labels, np.array(pts).reshape(-1, 3)


@dataclass
class Trajectory:
    """Head and wand poses as analytic functions of time."""
    fn: Callable[[float], tuple]
    duration: float
    kind: str = "custom"

    def __call__(self, t: float):
        return self.fn(t)

    def head(self, t: float) -> Pose:
        return self.fn(t)[0]

    def wand(self, t: float) -> Pose:
        return self.fn(t)[1]

    @classmethod
    def static(cls, head: Pose, wand: Pose | None = None, duration: float = 1.0):
        wand = wand if wand is not None else head
        return cls(lambda t: (head, wand), duration, "static")

    @classmethod
    def linear(cls, head: Pose, velocity, wand: Pose | None = None, duration: float = 1.0):
        vel = vec3(velocity, "velocity")
        wand = wand if wand is not None else head
        return cls(lambda t: (Pose(head.position + vel * t, head.orientation), wand),
                   duration, "linear")

    @classmethod
    def wag(cls, head: Pose, center, axis, amplitude: float, frequency: float,
            duration: float = 1.0):
        """Wand oscillating as ``center + amplitude*sin(2 pi f t)*axis``."""
        c, ax = vec3(center), geom.unit(vec3(axis))
        w = 2 * math.pi * frequency
        return cls(lambda t: (head, Pose(c + amplitude * math.sin(w * t) * ax)),
                   duration, "wag")

    @classmethod
    def circle(cls, head: Pose, center, radius: float, speed: float, normal=(0, 0, 1),
               duration: float = 1.0):
        """Wand moving at constant ``speed`` round a circle perpendicular to ``normal``."""
        c, n = vec3(center), geom.unit(vec3(normal))
        e1 = geom.unit(np.cross(n, [0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.cross(n, [1.0, 0, 0]))
        e2 = np.cross(n, e1)
        w = speed / radius
        return cls(lambda t: (head, Pose(c + radius * (math.cos(w * t) * e1 + math.sin(w * t) * e2))),
                   duration, "circle")


# -- tracker -----------------------------------------------------------------

def report_pose(pose_at: Callable[[float], Pose], t: float, faults: FaultSet,
                jitter: JitterSource | None = None) -> Pose:
    """What the tracker reports at time ``t`` for a sensor whose true pose
    is ``pose_at(t)``.

    Position faults compose as latency, distortion grid (sampled at the
    lagged true position), constant offset, jitter.  Orientation only lags.
    """
    lagged = pose_at(max(0.0, t - faults.latency_s))
    p = lagged.position
    if faults.distortion is not None:
        p = p + trilinear_sample(faults.distortion, p)
    p = p + faults.tracker_offset
    if faults.jitter_sigma > 0 and jitter is not None:
        p = p + faults.jitter_sigma * jitter.normal3(t)
    if p is lagged.position:
        return lagged
    return Pose(p, lagged.orientation)


def apply_correction(rig: RigConfig, pose: Pose) -> Pose:
    if rig.tracker_correction is None:
        return pose
    return Pose(pose.position - trilinear_sample(rig.tracker_correction, pose.position),
                pose.orientation)


# -- displayed output --------------------------------------------------------

@dataclass
class ScreenView:
    exploded: bool = False
    images: dict = field(default_factory=lambda: {"left": {}, "right": {}})
    horizon: dict = field(default_factory=lambda: {"left": None, "right": None})


@dataclass
class DisplayedFrame:
    time: float
    field_parity: str
    screens: dict                 # name -> ScreenView
    truth: tuple                  # (head Pose, wand Pose), un-faulted
    reported: tuple               # (head Pose, wand Pose) as used for rendering
    eyes: dict                    # "left"/"right" -> reported eye position

    def image(self, screen: str, eye: str, label: str) -> ScreenPoint | None:
        return self.screens[screen].images[eye].get(label)

    def find(self, eye: str, label: str):
        """(screen name, ScreenPoint) showing ``label`` to ``eye``, or None."""
        for name, view in self.screens.items():
            sp = view.images[eye].get(label)
            if sp is not None:
                return name, sp
        return None

    def to_dict(self) -> dict:
        def pose(p):
            return {"position": p.position.tolist(), "orientation": p.orientation.tolist()}

        screens = {}
        for name, view in self.screens.items():
            screens[name] = {
                "exploded": view.exploded,
                "horizon": dict(view.horizon),
                **{eye: {k: [sp.u, sp.v, sp.px, sp.py] for k, sp in view.images[eye].items()}
                   for eye in EYES},
            }
        return {
            "t": self.time,
            "field": self.field_parity,
            "truth": {"head": pose(self.truth[0]), "wand": pose(self.truth[1])},
            "reported": {"head": pose(self.reported[0]), "wand": pose(self.reported[1])},
            "eyes": {k: v.tolist() for k, v in self.eyes.items()},
            "screens": screens,
        }


def believed_basis(s: ScreenRect, sf: ScreenFaults) -> geom.ScreenBasis:
    """Where the software thinks the screen is."""
    return s.basis.shifted(sf.plane_shift)


def display_uv(s: ScreenRect, sf: ScreenFaults, eye, pts):
    """Render points from ``eye`` onto screen ``s`` as the faulty system does.

    Returns (uv on the physical screen after the projector affine, valid mask).
    """
    uv, valid = geom.project_many(eye, believed_basis(s, sf), pts)
    if not sf.affine_is_identity:
        a = sf.projector_affine
        uv = uv @ a[:, :2].T + a[:, 2]
    return uv, valid


def _overflow(uv, s: ScreenRect):
    w, h = s.width, s.height
    ou = np.maximum(0.0, np.maximum(-uv[:, 0], uv[:, 0] - w)) / w
    ov = np.maximum(0.0, np.maximum(-uv[:, 1], uv[:, 1] - h)) / h
    return ou + ov, (ou <= CLIP_MARGIN) & (ov <= CLIP_MARGIN)


def _horizon_v(eye, b: geom.ScreenBasis):
    # vanishing line of horizontal planes, defined on screens with vertical up
    if abs(b.up[1]) < 1 - 1e-9 or eye[1] <= 0:
        return None
    return float((eye[1] - b.origin[1]) / b.up[1])


def render_frame(t: float, rig: RigConfig, faults: FaultSet, scene: Scene,
                 trajectory: Trajectory, seed: int = 0, jitter=None) -> DisplayedFrame:
    """Displayed images at time ``t``.

    Each rendered point is kept on the single screen whose rectangle
    (with a 10% margin) contains it best; a screen whose believed plane the
    reported eye has reached is flagged as exploded and shows nothing.
    """
    if jitter is None:
        jitter = {s: JitterSource(seed, s) for s in SENSORS}
    true_head, true_wand = trajectory(t)
    head = apply_correction(rig, report_pose(trajectory.head, t, faults, jitter["head"]))
    wand = apply_correction(rig, report_pose(trajectory.wand, t, faults, jitter["wand"]))
    eye_l, eye_r = geom.derive_eyes(head, rig.ipd, rig.glasses_offset)
    eyes = {"left": eye_l, "right": eye_r}

    labels, pts = scene.static_points()
    if scene.wand_marker:
        labels = labels + ["wand"]
        pts = np.vstack([pts, wand.position[None, :]])

    views = {s.name: ScreenView() for s in rig.screens}
    for eye_name, eye in eyes.items():
        best_score = np.full(len(labels), np.inf)
        best_screen = np.full(len(labels), -1)
        per_screen = []
        for si, s in enumerate(rig.screens):
            sf = faults.for_screen(s.name)
            b = believed_basis(s, sf)
            if b.signed_distance(eye) <= geom.DEGENERATE_DISTANCE:
                views[s.name].exploded = True
                per_screen.append(None)
                continue
            if scene.ground_plane:
                hv = _horizon_v(eye, b)
                if hv is not None and not sf.affine_is_identity:
                    a = sf.projector_affine
                    hv = float(a[1, 0] * s.width / 2 + a[1, 1] * hv + a[1, 2])
                views[s.name].horizon[eye_name] = hv
            if not labels:
                per_screen.append(None)
                continue
            uv, valid = display_uv(s, sf, eye, pts)
            score, inside = _overflow(uv, s)
            ok = valid & inside & (score < best_score)
            best_score[ok] = score[ok]
            best_screen[ok] = si
            per_screen.append(uv)
        for i, label in enumerate(labels):
            si = best_screen[i]
            if si < 0:
                continue
            s = rig.screens[si]
            u, v = per_screen[si][i]
            views[s.name].images[eye_name][label] = ScreenPoint.from_uv(u, v, s)

    for s in rig.screens:
        if faults.for_screen(s.name).eye_swap:
            view = views[s.name]
            view.images = {"left": view.images["right"], "right": view.images["left"]}
            view.horizon = {"left": view.horizon["right"], "right": view.horizon["left"]}

    field_index = int(math.floor(t * 2 * rig.frame_rate_hz + 1e-9))
    return DisplayedFrame(t, EYES[field_index % 2], views, (true_head, true_wand),
                          (head, wand), eyes)


def frame_times(duration: float, rate: float, t0: float = 0.0) -> np.ndarray:
    n = int(math.floor(duration * rate + 1e-9))
    return t0 + np.arange(n + 1) / rate


def simulate(rig: RigConfig, faults: FaultSet, scene: Scene, trajectory: Trajectory,
             duration: float, seed: int = 0, t0: float = 0.0) -> list[DisplayedFrame]:
    """Frames at ``t0 + k / frame_rate`` for k = 0 .. floor(duration * rate)."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    jitter = {s: JitterSource(seed, s) for s in SENSORS}
    return [render_frame(float(t), rig, faults, scene, trajectory, seed, jitter)
            for t in frame_times(duration, rig.frame_rate_hz, t0)]
