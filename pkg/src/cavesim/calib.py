"""Static tracker-error lookup tables and line-of-sight offset recovery.

A :class:`DistortionGrid` stores one offset vector per node of a regular
3D lattice and is sampled by trilinear interpolation.  The same type models
an injected tracker distortion (``reported = true + grid(true)``) and a
software correction (``corrected = reported - grid(reported)``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UnobservableError
from .geom import ScreenPoint, ScreenRect, vec3


@dataclass
class DistortionGrid:
    lo: np.ndarray
    hi: np.ndarray
    offsets: np.ndarray  # shape (nx, ny, nz, 3), indexed [i, j, k]

    def __post_init__(self):
        self.lo = vec3(self.lo, "bounds.min")
        self.hi = vec3(self.hi, "bounds.max")
        self.offsets = np.asarray(self.offsets, dtype=float)
        if not np.all(self.lo < self.hi):
            raise ConfigurationError("bounds min must be below max on every axis", "bounds")
        if self.offsets.ndim != 4 or self.offsets.shape[3] != 3 or min(self.offsets.shape[:3]) < 2:
            raise ConfigurationError("need at least 2 nodes per axis", "dims")
        if not np.all(np.isfinite(self.offsets)):
            raise ConfigurationError("non-finite offset", "offsets")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.offsets.shape[:3])

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.dims) - 1)

    def node(self, i, j, k) -> np.ndarray:
        return self.lo + self.spacing * np.array([i, j, k])

    def node_positions(self) -> np.ndarray:
        axes = [np.linspace(self.lo[a], self.hi[a], self.dims[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @classmethod
    def zeros(cls, lo, hi, dims=(2, 2, 2)):
        return cls(lo, hi, np.zeros((*dims, 3)))

    @classmethod
    def constant(cls, lo, hi, offset, dims=(2, 2, 2)):
        return cls(lo, hi, np.broadcast_to(vec3(offset), (*dims, 3)).copy())

    @classmethod
    def from_function(cls, fn, lo, hi, dims):
        g = cls.zeros(lo, hi, dims)
        nodes = g.node_positions()
        g.offsets = np.apply_along_axis(lambda p: vec3(fn(p)), -1, nodes)
        return g

    def sample(self, p) -> np.ndarray:
        return trilinear_sample(self, p)

    # x-fastest flat layout: index = i + nx * (j + ny * k)
    def to_dict(self) -> dict:
        return {
            "unit": "m",
            "bounds": {"min": self.lo.tolist(), "max": self.hi.tolist()},
            "dims": list(self.dims),
            "order": "x-fastest",
            "offsets": self.offsets.transpose(2, 1, 0, 3).reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, scale: float = 1.0):
        try:
            dims = [int(n) for n in d["dims"]]
            lo = np.asarray(d["bounds"]["min"], dtype=float) * scale
            hi = np.asarray(d["bounds"]["max"], dtype=float) * scale
            flat = np.asarray(d["offsets"], dtype=float) * scale
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed grid ({exc})", "distortion") from None
        if len(dims) != 3:
            raise ConfigurationError("dims must have 3 entries", "dims")
        if d.get("order", "x-fastest") != "x-fastest":
            raise ConfigurationError("only x-fastest order is supported", "order")
        if flat.size != 3 * dims[0] * dims[1] * dims[2]:
            raise ConfigurationError(f"expected {3 * np.prod(dims)} offset values, got {flat.size}",
                                     "offsets")
        offsets = flat.reshape(dims[2], dims[1], dims[0], 3).transpose(2, 1, 0, 3)
        return cls(lo, hi, offsets)


def trilinear_sample(grid: DistortionGrid, p) -> np.ndarray:
    """Trilinear blend of the 8 nodes around ``p``.

    Accepts one point (3,) or many (n, 3).  Points outside the bounds are
    clamped onto the boundary first, so the field is extended as constant
    along the outward normal.
    """
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    dims = np.array(grid.dims)
    f = (np.clip(pts, grid.lo, grid.hi) - grid.lo) / (grid.hi - grid.lo) * (dims - 1)
    i0 = np.minimum(np.floor(f).astype(int), dims - 2)
    w = f - i0
    out = np.zeros_like(pts)
    for dx in (0, 1):
        wx = w[:, 0] if dx else 1.0 - w[:, 0]
        for dy in (0, 1):
            wy = w[:, 1] if dy else 1.0 - w[:, 1]
            for dz in (0, 1):
                wz = w[:, 2] if dz else 1.0 - w[:, 2]
                node = grid.offsets[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out += (wx * wy * wz)[:, None] * node
    return out[0] if single else out


def correct(grid: DistortionGrid, reported) -> np.ndarray:
    """One-step correction, indexing the table by the reported position."""
    reported = np.asarray(reported, dtype=float)
    return reported - trilinear_sample(grid, reported)


# -- line-of-sight solver ----------------------------------------------------

@dataclass(frozen=True)
class Observation:
    """One alignment sighting.

    ``marker_image`` is where the marker has to appear on ``screen`` so that
    it lines up with the physical target as seen by the viewer; the tracker
    meanwhile reports the viewing eye at ``reported_eye``.
    """
    reported_eye: np.ndarray
    screen: str
    marker_image: ScreenPoint
    target_label: str


@dataclass
class SolveResult:
    offset: np.ndarray
    residual: float  # rms point-to-sight-line distance, m
    iterations: int
    objective_history: list


def _sight_residuals(delta, eyes, marks, targets):
    c = eyes - delta
    d = marks - c
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    tc = targets - c
    return (tc - d * np.sum(tc * d, axis=1, keepdims=True)).reshape(-1)


def gauss_newton(residual_fn, x0, tol=1e-7, max_iter=100, step=1e-7, rank_tol=1e-8):
    """Minimise ``sum(residual_fn(x)**2)`` with a central-difference Jacobian.

    Steps are halved until the objective does not increase, so the accepted
    objective sequence is monotone.  Returns (x, history, iterations).
    Raises UnobservableError when the Jacobian is rank deficient at a step.
    """
    x = np.asarray(x0, dtype=float).copy()
    r = residual_fn(x)
    obj = float(r @ r)
    history = [obj]
    it = 0
    for it in range(1, max_iter + 1):
        jac = np.empty((r.size, x.size))
        for j in range(x.size):
            h = np.zeros_like(x)
            h[j] = step
            jac[:, j] = (residual_fn(x + h) - residual_fn(x - h)) / (2 * step)
        _, sv, vt = np.linalg.svd(jac, full_matrices=False)
        if sv[-1] <= rank_tol * max(sv[0], 1e-300):
            raise UnobservableError("rank-deficient geometry", vt[-1])
        dx = -np.linalg.lstsq(jac, r, rcond=None)[0]
        lam = 1.0
        while True:
            x_new = x + lam * dx
            r_new = residual_fn(x_new)
            obj_new = float(r_new @ r_new)
            if obj_new <= obj or lam < 1e-6:
                break
            lam *= 0.5
        if obj_new > obj:
            break
        x, r, obj = x_new, r_new, obj_new
        history.append(obj)
        if np.linalg.norm(lam * dx) < tol:
            break
    return x, history, it


def line_of_sight_solve(observations, targets, rig) -> SolveResult:
    """Constant tracker offset that lines every marker up with its target.

    The viewer's true eye is taken as ``reported_eye - offset``; the solver
    minimises the squared distance of each target from the sight line
    through that eye and the on-screen marker.
    """
    observations = list(observations)
    if len(observations) < 2:
        raise ValueError("need at least two observations")
    tpos = {label: vec3(p) for label, p in dict(targets).items()}
    screens = {s.name: s for s in rig.screens}
    eyes = np.array([o.reported_eye for o in observations], dtype=float)
    marks = np.array([screens[o.screen].basis.to_world(o.marker_image.u, o.marker_image.v)
                      for o in observations])
    tg = np.array([tpos[o.target_label] for o in observations])

    def fn(delta):
        return _sight_residuals(delta, eyes, marks, tg)

    x, history, it = gauss_newton(fn, np.zeros(3))
    r = fn(x)
    return SolveResult(x, math.sqrt(float(r @ r) / len(observations)), it, history)


def observe_target(rig, screen_list, true_eye, reported_eye, label, target):
    """Sighting of ``target`` from ``true_eye``: the first screen the sight
    line crosses inside its rectangle, or ``None`` when it hits no screen."""
    true_eye = np.asarray(true_eye, dtype=float)
    d = np.asarray(target, dtype=float) - true_eye
    best = None
    for s in screen_list:
        b = s.basis
        a = b.signed_distance(true_eye)
        dn = float(d @ b.normal)
        if a <= 0 or dn >= 0:
            continue
        t = a / -dn
        u, v = b.to_uv(true_eye + t * d)
        if 0 <= u <= b.width and 0 <= v <= b.height and (best is None or t < best[0]):
            best = (t, s, u, v)
    if best is None:
        return None
    _, s, u, v = best
    return Observation(np.asarray(reported_eye, dtype=float), s.name,
                       ScreenPoint.from_uv(u, v, s), label)


def build_correction_grid(stations, bounds, resolution) -> DistortionGrid:
    """Scatter station offsets onto a lattice by inverse-distance weighting.

    ``stations`` is a sequence of (position, offset); weights are 1/d^2 and a
    node that coincides with a station takes that station's offset.
    """
    stations = list(stations)
    if not stations:
        raise ValueError("no stations to build a correction grid from")
    lo, hi = (vec3(b) for b in bounds)
    pos = np.array([vec3(p) for p, _ in stations])
    off = np.array([vec3(o) for _, o in stations])
    grid = DistortionGrid.zeros(lo, hi, tuple(int(n) for n in resolution))
    nodes = grid.node_positions().reshape(-1, 3)
    d2 = np.sum((nodes[:, None, :] - pos[None, :, :]) ** 2, axis=2)
    values = np.empty_like(nodes)
    for n in range(len(nodes)):
        hit = np.flatnonzero(d2[n] < 1e-24)
        if hit.size:
            values[n] = off[hit[0]]
        else:
            w = 1.0 / d2[n]
            values[n] = w @ off / w.sum()
    grid.offsets = values.reshape(*grid.dims, 3)
    return grid
