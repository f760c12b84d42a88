"""Canonical single faults used to exercise the diagnostic suite.

Each entry names the test built to catch the fault, the estimate that
quantifies it, the expected value and tolerance, and the other tests that
are geometrically entitled to react to it (a tracker position error, for
instance, legitimately moves the fixed marker too).  Any test outside
``designated`` + ``also_sensitive`` must pass or be inconclusive.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .calib import DistortionGrid
from .geom import quat_from_axis_angle, quat_to_matrix
from .rig import FaultSet, ScreenFaults

# bounds wide enough to hold every pose the suite visits
GRID_LO = (-4.0, -2.0, -4.0)
GRID_HI = (4.0, 5.0, 4.0)
PIVOT = np.array([0.0, 1.5, 0.0])


def yaw_field(deg: float, pivot=PIVOT) -> DistortionGrid:
    """Grid whose offsets rotate reported positions by ``deg`` about +y at ``pivot``."""
    r = quat_to_matrix(quat_from_axis_angle((0, 1, 0), math.radians(deg)))
    pivot = np.asarray(pivot, dtype=float)
    return DistortionGrid.from_function(lambda p: r @ (p - pivot) + pivot - p,
                                        GRID_LO, GRID_HI, (2, 2, 2))


def z_flip_field() -> DistortionGrid:
    """Grid that mirrors reported z about z = 0."""
    return DistortionGrid.from_function(lambda p: (0.0, 0.0, -2.0 * p[2]),
                                        GRID_LO, GRID_HI, (2, 2, 2))


def bulge_field(center, amplitude, radius, lo=GRID_LO, hi=GRID_HI, dims=(17, 15, 17)):
    """Smooth radial bump of offsets (along +x) peaking at ``center``."""
    c = np.asarray(center, dtype=float)

    def fn(p):
        return (amplitude * math.exp(-float(np.sum((p - c) ** 2)) / (2 * radius ** 2)), 0.0, 0.0)

    return DistortionGrid.from_function(fn, lo, hi, dims)


@dataclass
class CanonicalFault:
    name: str
    make: Callable[[], FaultSet]
    designated: str
    estimate: str
    expected: float
    tolerance: float
    also_sensitive: frozenset = field(default_factory=frozenset)
    screen: str | None = None   # restrict the designated finding to this screen

    def magnitude(self, finding) -> float:
        v = finding.value(self.estimate)
        return float(np.linalg.norm(v)) if isinstance(v, list) else float(v)


_POSITION = frozenset({"test_fixed_marker", "test_line_bend", "test_wand_attachment",
                       "locate_projection_plane", "test_horizon"})

CANONICAL_FAULTS = (
    CanonicalFault("eye_swap", lambda: FaultSet(screens={"right": ScreenFaults(eye_swap=True)}),
                   "test_stereo_phase", "right.du_behind", 0.01625, 1e-9),
    CanonicalFault("offset_x", lambda: FaultSet(tracker_offset=(0.1, 0.0, 0.0)),
                   "test_line_bend", "recovered_offset", 0.1, 1e-3, _POSITION),
    CanonicalFault("latency", lambda: FaultSet(latency_s=0.1),
                   "estimate_latency_phase", "latency", 0.1, 0.005,
                   frozenset({"test_wand_attachment"})),
    CanonicalFault("jitter", lambda: FaultSet(jitter_sigma=0.002),
                   "estimate_jitter", "sigma_rms", 0.002, 0.15 * 0.002),
    CanonicalFault("yawed_frame", lambda: FaultSet(distortion=yaw_field(10.0)),
                   "test_parallax_orientation", "rotation_angle", 10.0, 0.5, _POSITION),
    CanonicalFault("z_flip", lambda: FaultSet(distortion=z_flip_field()),
                   "test_shrink", "violations", 24, 0.5,
                   _POSITION | {"test_parallax_orientation"}),
    CanonicalFault("plane_shift", lambda: FaultSet(screens={"front": ScreenFaults(plane_shift=0.1)}),
                   "locate_projection_plane", "plane_offset", 0.1, 1e-3,
                   frozenset({"test_line_bend", "test_edge_match", "test_parallax_orientation",
                              "test_fixed_marker", "test_wand_attachment"}),
                   screen="front"),
    CanonicalFault("projector_shift",
                   lambda: FaultSet(screens={"right": ScreenFaults(
                       projector_affine=[[1.0, 0.0, 0.002], [0.0, 1.0, 0.0]])}),
                   "test_edge_match", "max_gap", 0.002, 1e-6),
    CanonicalFault("offset_y", lambda: FaultSet(tracker_offset=(0.0, 0.2, 0.0)),
                   "test_horizon", "vertical_offset", 0.2, 1e-3, _POSITION),
)


def by_name(name: str) -> CanonicalFault:
    for c in CANONICAL_FAULTS:
        if c.name == name:
            return c
    raise KeyError(name)
