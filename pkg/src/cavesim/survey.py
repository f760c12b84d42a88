"""Line-of-sight tracker survey: gather sightings at a lattice of stations,
solve a local offset per station and turn them into a correction table."""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .calib import (DistortionGrid, SolveResult, build_correction_grid, line_of_sight_solve,
                    observe_target)
from .geom import Pose, vec3
from .rig import FaultSet, JitterSource, RigConfig, apply_correction, report_pose

DEFAULT_TARGETS = {
    "front": (0.0, 1.5, -1.2),
    "left": (-1.2, 1.5, 0.0),
    "right": (1.2, 1.5, 0.0),
    "low": (0.0, 0.3, 0.0),
}


def lattice(xs=(-1.0, 0.0, 1.0), ys=(0.8, 1.6, 2.4), zs=(-0.9, 0.0, 0.9)) -> list[np.ndarray]:
    return [np.array(p, dtype=float) for p in itertools.product(xs, ys, zs)]


@dataclass
class SurveyConfig:
    stations: list = field(default_factory=lattice)
    targets: dict = field(default_factory=lambda: dict(DEFAULT_TARGETS))
    viewpoints: int = 5          # sightings per target per station
    spread: float = 0.15         # m, half-width of the viewpoint cube round a station
    resolution: tuple = (5, 5, 5)
    bounds: tuple | None = None  # (min, max); default: station box plus margin
    margin: float = 0.25

    def __post_init__(self):
        self.stations = [vec3(s, "stations") for s in self.stations]
        self.targets = {k: vec3(v, f"targets.{k}") for k, v in self.targets.items()}


@dataclass
class StationResult:
    station: np.ndarray      # nominal station position
    position: np.ndarray     # mean reported head position (where the table is indexed)
    solve: SolveResult
    n_observations: int


def survey_station(rig: RigConfig, faults: FaultSet, station, targets, viewpoints, spread,
                   rng, jitter, t0):
    """Sightings from ``viewpoints`` random head positions round ``station``.

    Returns (observations, mean reported head position, next free time).
    """
    station = vec3(station)
    obs, reported = [], []
    t = t0
    for _ in range(viewpoints):
        head = Pose(station + rng.uniform(-spread, spread, 3))
        rep = apply_correction(rig, report_pose(lambda _t, h=head: h, t, faults, jitter))
        t += 1.0 / rig.frame_rate_hz
        true_eye = geom.derive_eyes(head, rig.ipd, rig.glasses_offset)[0]
        rep_eye = geom.derive_eyes(rep, rig.ipd, rig.glasses_offset)[0]
        reported.append(rep.position)
        for label, p in targets.items():
            o = observe_target(rig, rig.screens, true_eye, rep_eye, label, p)
            if o is not None:
                obs.append(o)
    return obs, np.mean(reported, axis=0), t


def run_survey(rig: RigConfig, faults: FaultSet, cfg: SurveyConfig | None = None, seed=0):
    """Solve every station; raises UnobservableError on a degenerate one."""
    cfg = cfg or SurveyConfig()
    rng = np.random.default_rng(seed)
    jitter = JitterSource(seed, "head")
    results, t = [], 0.0
    for st in cfg.stations:
        obs, pos, t = survey_station(rig, faults, st, cfg.targets, cfg.viewpoints, cfg.spread,
                                     rng, jitter, t)
        res = line_of_sight_solve(obs, cfg.targets, rig)
        results.append(StationResult(st, pos, res, len(obs)))
    return results


def correction_from_survey(results, cfg: SurveyConfig) -> DistortionGrid:
    if cfg.bounds is not None:
        lo, hi = cfg.bounds
    else:
        pos = np.array([r.position for r in results])
        lo, hi = pos.min(axis=0) - cfg.margin, pos.max(axis=0) + cfg.margin
    return build_correction_grid([(r.position, r.solve.offset) for r in results], (lo, hi),
                                 cfg.resolution)


def calibrate(rig: RigConfig, faults: FaultSet, cfg: SurveyConfig | None = None, seed=0):
    """Survey, build the table, and compare the fixed-marker error before and after.

    Returns (grid, station results, summary dict).
    """
    from .diagnostics import test_fixed_marker

    cfg = cfg or SurveyConfig()
    results = run_survey(rig, faults, cfg, seed)
    grid = correction_from_survey(results, cfg)
    corrected = dataclasses.replace(rig, tracker_correction=grid)
    before = test_fixed_marker(rig, faults, seed=seed)
    after = test_fixed_marker(corrected, faults, seed=seed)

    def err(f):
        return f.value("tracking_error") if "tracking_error" in f.estimates else None

    e0, e1 = err(before), err(after)
    summary = {
        "stations": len(results),
        "max_station_residual_m": max(r.solve.residual for r in results),
        "fixed_marker_error_before_m": e0,
        "fixed_marker_error_after_m": e1,
        "improvement": (e0 / e1 if e0 is not None and e1 else None),
    }
    return grid, results, summary
