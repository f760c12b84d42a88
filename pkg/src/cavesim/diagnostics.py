"""Automated display-quality probes.

Every test drives the simulated glasses and wand through a scripted motion,
reads back only what a viewer could observe (displayed images, the
physical position of the glasses, known virtual object positions) and
turns it into a :class:`Finding`.  Held poses are rendered as static
trajectories, i.e. the glasses are kept still long enough for latency to
play no role; each hold gets its own stretch of the simulated clock so
jitter samples never repeat between holds.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import geom
from .calib import gauss_newton
from .errors import UnobservableError
from .geom import Pose
from .rig import (EYES, FaultSet, RigConfig, Scene, Trajectory, display_uv,
                  render_frame, simulate)

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


@dataclass
class Thresholds:
    orientation_deg: float = 2.0
    plane_offset_m: float = 0.01
    bend_deg: float = 0.1
    horizon_m: float = 0.01
    latency_s: float = 0.02
    wand_lag_m: float = 0.01
    jitter_m: float = 0.0005
    fixed_marker_m: float = 0.01
    edge_gap_m: float = 0.001


@dataclass
class Finding:
    test_name: str
    status: str = INCONCLUSIVE
    estimates: dict = field(default_factory=dict)   # name -> (value, unit)
    evidence: list = field(default_factory=list)
    threshold: dict = field(default_factory=dict)   # name -> (value, unit)
    notes: list = field(default_factory=list)
    screen: str | None = None

    def add(self, name, value, unit=""):
        if isinstance(value, np.ndarray):
            value = value.tolist()
        elif isinstance(value, (np.floating, np.integer)):
            value = value.item()
        self.estimates[name] = (value, unit)

    def value(self, name):
        return self.estimates[name][0]

    def to_dict(self) -> dict:
        return {
            "test_name": self.test_name,
            "status": self.status,
            "screen": self.screen,
            "estimates": {k: {"value": v, "unit": u} for k, (v, u) in self.estimates.items()},
            "evidence": list(self.evidence),
            "threshold": {k: {"value": v, "unit": u} for k, (v, u) in self.threshold.items()},
            "notes": list(self.notes),
        }


@dataclass
class DiagnosticReport:
    rig_digest: str
    faults_digest: str | None
    findings: list
    seed: int

    def status_counts(self) -> dict:
        counts = {PASS: 0, FAIL: 0, INCONCLUSIVE: 0}
        for f in self.findings:
            counts[f.status] += 1
        return counts

    def failed_tests(self) -> list[str]:
        return [f.test_name for f in self.findings if f.status == FAIL]

    def to_dict(self) -> dict:
        from . import __version__
        from .io import REPORT_SCHEMA_VERSION
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "tool_version": __version__,
            "seed": self.seed,
            "rig_digest": self.rig_digest,
            "faults_digest": self.faults_digest,
            "summary": self.status_counts(),
            "findings": [f.to_dict() for f in self.findings],
        }


def _verdict(finding, error, uncertainty, threshold):
    if not math.isfinite(uncertainty) or uncertainty >= threshold:
        finding.status = INCONCLUSIVE
        finding.notes.append(f"uncertainty {uncertainty:.3g} not below threshold {threshold:.3g}")
    else:
        finding.status = FAIL if error > threshold else PASS


# -- shared observation helpers ---------------------------------------------

class _Clock:
    """Hands out disjoint time windows for held poses."""

    def __init__(self, rate):
        self.rate = rate
        self.t = 0.0

    def window(self, n):
        t0 = self.t
        self.t += (n + 1) / self.rate
        return t0


def _hold(rig, faults, scene, head, wand, n, clock, seed):
    traj = Trajectory.static(head, wand if wand is not None else head)
    t0 = clock.window(n)
    return simulate(rig, faults, scene, traj, (n - 1) / rig.frame_rate_hz + 1e-12, seed, t0)[:n]


def _mean_uv(frames, screen, eye, labels):
    """Mean displayed (u, v) per label over frames, or None if any is missing."""
    out = {}
    for label in labels:
        pts = [f.image(screen, eye, label) for f in frames]
        if any(p is None for p in pts):
            return None
        out[label] = np.mean([p.uv for p in pts], axis=0)
    return out


def _nearest_point_to_lines(origins, directions):
    """Least-squares point closest to a bundle of 3D lines."""
    a = np.zeros((3, 3))
    rhs = np.zeros(3)
    for o, d in zip(origins, directions):
        d = d / np.linalg.norm(d)
        m = np.eye(3) - np.outer(d, d)
        a += m
        rhs += m @ o
    return np.linalg.solve(a, rhs)


def _viewpoint_from_images(s, probes, uv):
    """Viewpoint implied by displayed images of known points on screen ``s``."""
    pts = np.array([probes[k] for k in uv])
    xs = np.array([s.basis.to_world(*uv[k]) for k in uv])
    return _nearest_point_to_lines(pts, xs - pts)


def _triangulate(eye_l, x_l, eye_r, x_r):
    """Midpoint of the shortest segment between two sight rays."""
    d1, d2 = x_l - eye_l, x_r - eye_r
    w = eye_l - eye_r
    a, b, c = d1 @ d1, d1 @ d2, d2 @ d2
    d, e = d1 @ w, d2 @ w
    den = a * c - b * b
    s = (b * e - c * d) / den
    t = (a * e - b * d) / den
    return 0.5 * ((eye_l + s * d1) + (eye_r + t * d2))


def _primary_screen(rig):
    """First screen with a vertical up axis (a wall)."""
    for s in rig.screens:
        if abs(s.basis.up[1]) > 1 - 1e-9:
            return s
    return None


def _viewing_distance(rig, s):
    return max(0.5, s.basis.signed_distance(rig.interior_point))


def _facing_pose(s, a, offset=(0.0, 0.0, 0.0)):
    b = s.basis
    return Pose(s.center + a * b.normal + np.asarray(offset, dtype=float),
                geom.facing_orientation(b))


def _reconstruction_probes(s):
    b = s.basis
    c = s.center
    spots = [(-0.6, -0.5, 1.0), (0.7, -0.4, 2.0), (-0.5, 0.6, 4.0), (0.6, 0.7, 0.5)]
    return {f"rec{i}": c + du * b.right + dv * b.up - depth * b.normal
            for i, (du, dv, depth) in enumerate(spots)}


def shared_edges(rig):
    """Pairs of screens sharing an edge: list of (name_a, name_b, p0, p1)."""
    def edges(s):
        ll, lr, ul = s.lower_left, s.lower_right, s.upper_left
        ur = lr + ul - ll
        return [(ll, lr), (lr, ur), (ur, ul), (ul, ll)]

    out = []
    for i, a in enumerate(rig.screens):
        for b in rig.screens[i + 1:]:
            for p0, p1 in edges(a):
                for q0, q1 in edges(b):
                    if ((np.allclose(p0, q0, atol=1e-6) and np.allclose(p1, q1, atol=1e-6))
                            or (np.allclose(p0, q1, atol=1e-6) and np.allclose(p1, q0, atol=1e-6))):
                        out.append((a.name, b.name, p0.copy(), p1.copy()))
    return out


# -- tests ---------------------------------------------------------------------

def test_parallax_orientation(rig: RigConfig, faults: FaultSet, screen=None, seed=0,
                              probe_depth=3.0, sweep=0.2, n_frames=10, thresholds=None):
    """Sweep the glasses parallel to a wall and watch a far object's image.

    The image must move with the glasses at the ratio b/(a+b).  The
    reported viewpoint is reconstructed at every stop from several known
    probes; fitting a rotation between commanded and apparent glasses
    motion exposes a rotated tracker frame.
    """
    th = thresholds or Thresholds()
    f = Finding("test_parallax_orientation")
    f.threshold["angle"] = (th.orientation_deg, "deg")
    s = rig.screen(screen) if screen else _primary_screen(rig)
    if s is None:
        f.notes.append("no wall screen")
        return f
    f.screen = s.name
    b = s.basis
    a0 = _viewing_distance(rig, s)
    probes = _reconstruction_probes(s)
    probes["target"] = s.center - probe_depth * b.normal
    scene = Scene(probes=probes)
    clock = _Clock(rig.frame_rate_hz)

    steps = [k * sweep / 2 for k in (-2, -1, 1, 2)]
    commands = [np.zeros(3)] + [k * b.right for k in steps] + [k * b.up for k in steps]
    images, viewpoints = [], []
    for cmd in commands:
        frames = _hold(rig, faults, scene, _facing_pose(s, a0, cmd), None, n_frames, clock, seed)
        uv = _mean_uv(frames, s.name, "left", list(probes))
        if uv is None:
            f.notes.append("probe left the screen during the sweep")
            return f
        images.append(uv)
        rec = {k: v for k, v in uv.items() if k != "target"}
        viewpoints.append(_viewpoint_from_images(s, probes, rec))

    true_eye0 = geom.derive_eyes(_facing_pose(s, a0), rig.ipd, rig.glasses_offset)[0]
    a = b.signed_distance(true_eye0)
    depth = geom.depth_behind(s, probes["target"])
    expected = depth / (a + depth)
    ratios, cosines = [], []
    for cmd, uv in zip(commands[1:], images[1:]):
        c2 = np.array([cmd @ b.right, cmd @ b.up])
        disp = uv["target"] - images[0]["target"]
        ratios.append(float(disp @ c2 / (c2 @ c2)))
        cosines.append(float(disp @ c2 / (np.linalg.norm(disp) * np.linalg.norm(c2) + 1e-300)))

    cmat = np.array(commands[1:])
    dmat = np.array(viewpoints[1:]) - viewpoints[0]
    u, _, vt = np.linalg.svd(cmat.T @ dmat)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    angle = math.degrees(math.acos(np.clip((np.trace(rot) - 1) / 2, -1.0, 1.0)))
    axis = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    axis = axis / np.linalg.norm(axis) if np.linalg.norm(axis) > 1e-12 else np.zeros(3)
    resid = dmat - cmat @ rot.T
    unc = math.degrees(math.sqrt(np.mean(np.sum(resid ** 2, axis=1)) / np.mean(np.sum(cmat ** 2, axis=1))))

    f.add("expected_ratio", expected)
    f.add("measured_ratio", float(np.mean(ratios)))
    f.add("ratio_error", float(np.max(np.abs(np.array(ratios) - expected))))
    f.add("direction_cosine", float(min(cosines)))
    f.add("rotation_angle", angle, "deg")
    f.add("rotation_axis", axis)
    f.add("angle_uncertainty", unc, "deg")
    if min(cosines) <= 0:
        f.status = FAIL
        f.evidence.append("image moves against the glasses")
    else:
        _verdict(f, angle, unc, th.orientation_deg)
    if f.status == FAIL and angle > th.orientation_deg:
        f.evidence.append(f"tracker frame rotated {angle:.2f} deg about {np.round(axis, 3).tolist()}")
    return f


def test_shrink(rig: RigConfig, faults: FaultSet, screen=None, seed=0, probe_depth=3.0,
                width=1.0, a_start=1.5, a_end=0.3, steps=25, n_frames=3, thresholds=None):
    """Walk the glasses toward a wall; a behind-screen object must shrink."""
    f = Finding("test_shrink")
    s = rig.screen(screen) if screen else _primary_screen(rig)
    if s is None:
        f.notes.append("no wall screen")
        return f
    f.screen = s.name
    b = s.basis
    c = s.center - probe_depth * b.normal
    probes = {"shrink_a": c - 0.5 * width * b.right, "shrink_b": c + 0.5 * width * b.right}
    scene = Scene(probes=probes)
    clock = _Clock(rig.frame_rate_hz)
    dists = np.linspace(a_start, a_end, steps)
    extents, expected, spread = [], [], []
    for a in dists:
        head = _facing_pose(s, a)
        frames = _hold(rig, faults, scene, head, None, n_frames, clock, seed)
        if any(fr.screens[s.name].exploded for fr in frames):
            f.notes.append(f"image exploded at {a:.3f} m; plane misregistration suspected, "
                           "see locate_projection_plane")
            return f
        per = []
        for fr in frames:
            pa, pb = fr.image(s.name, "left", "shrink_a"), fr.image(s.name, "left", "shrink_b")
            if pa is None or pb is None:
                f.notes.append("probe left the screen during the approach")
                return f
            per.append(float(np.linalg.norm(pb.uv - pa.uv)))
        extents.append(float(np.mean(per)))
        spread.append(float(np.std(per)) / math.sqrt(len(per)))
        eye = geom.derive_eyes(head, rig.ipd, rig.glasses_offset)[0]
        ea = b.signed_distance(eye)
        expected.append(width * ea / (ea + probe_depth))

    extents = np.array(extents)
    diffs = np.diff(extents)
    f.add("extent_start", extents[0], "m")
    f.add("extent_end", extents[-1], "m")
    f.add("max_model_error", float(np.max(np.abs(extents - np.array(expected)))), "m")
    f.add("extent_uncertainty", float(max(spread)), "m")
    if abs(probe_depth) < 1e-9:
        f.add("violations", 0)
        f.status = PASS
        f.notes.append("object on the projection plane: extent stays constant")
        return f
    # behind the plane the extent must fall as the eye closes in; in front it grows
    wrong = diffs >= 0 if probe_depth > 0 else diffs <= 0
    f.add("violations", int(np.count_nonzero(wrong)))
    if np.any(wrong):
        f.status = FAIL
        first = int(np.argmax(wrong))
        f.evidence.append(f"extent {'grew' if probe_depth > 0 else 'shrank'} between "
                          f"{dists[first]:.3f} m and {dists[first + 1]:.3f} m")
    else:
        f.status = PASS
    return f


def test_stereo_phase(rig: RigConfig, faults: FaultSet, seed=0, depth=0.5, n_frames=5,
                      thresholds=None):
    """Per screen: an object in front must show the left image right of the
    right image, an object behind the reverse."""
    f = Finding("test_stereo_phase")
    clock = _Clock(rig.frame_rate_hz)
    failing, unknown = [], []
    for s in rig.screens:
        b = s.basis
        a0 = _viewing_distance(rig, s)
        probes = {"front": s.center + depth * b.normal, "behind": s.center - depth * b.normal,
                  "plane": s.center.copy()}
        frames = _hold(rig, faults, Scene(probes=probes), _facing_pose(s, a0), None,
                       n_frames, clock, seed)
        left = _mean_uv(frames, s.name, "left", list(probes))
        right = _mean_uv(frames, s.name, "right", list(probes))
        if left is None or right is None:
            unknown.append(s.name)
            continue
        du = {k: float(left[k][0] - right[k][0]) for k in probes}
        f.add(f"{s.name}.du_front", du["front"], "m")
        f.add(f"{s.name}.du_behind", du["behind"], "m")
        f.add(f"{s.name}.du_plane", abs(du["plane"]), "m")
        if du["front"] > 0 and du["behind"] < 0:
            verdict = "ok"
        elif du["front"] < 0 and du["behind"] > 0:
            verdict = "swapped"
            failing.append(s.name)
        else:
            verdict = "inconsistent"
            failing.append(s.name)
        f.add(f"{s.name}.phase", verdict)
        if abs(du["plane"]) > 1e-6:
            f.notes.append(f"{s.name}: on-plane control shows {du['plane']:.4f} m disparity")
    if failing:
        f.status = FAIL
        f.evidence += [f"{n}: left/right views reversed" for n in failing]
    elif unknown:
        f.notes.append(f"probes not visible on {unknown}")
    else:
        f.status = PASS
    return f


def locate_projection_plane(rig: RigConfig, faults: FaultSet, screen=None, seed=0, span=0.5,
                            step=0.0005, thresholds=None):
    """Approach a screen until its image explodes.

    The physical glasses position at the explosion gives the offset between
    where the software places the plane and the physical screen (positive:
    on the viewer's side).  A second estimate finds the depth at which an
    object shows zero disparity; if the two disagree the error is in the
    tracking rather than in the screen description.
    """
    th = thresholds or Thresholds()
    s = rig.screen(screen) if screen else _primary_screen(rig) or rig.screens[0]
    f = Finding("locate_projection_plane", screen=s.name)
    f.threshold["offset"] = (th.plane_offset_m, "m")
    b = s.basis
    sub = dataclasses.replace(rig, screens=[s])
    growth = {"grow_a": s.center + 0.25 * step * b.normal - 0.05 * b.right,
              "grow_b": s.center + 0.25 * step * b.normal + 0.05 * b.right}
    scene = Scene(probes=growth)
    clock = _Clock(rig.frame_rate_hz)
    ref = []

    def exploded(a):
        fr = _hold(sub, faults, scene, _facing_pose(s, a), None, 1, clock, seed)[0]
        view = fr.screens[s.name]
        if view.exploded:
            return True
        pa, pb = view.images["left"].get("grow_a"), view.images["left"].get("grow_b")
        if pa is None or pb is None:
            return False
        ext = float(np.linalg.norm(pb.uv - pa.uv))
        if not ref:
            ref.append(ext)
            return False
        return ext > 100 * ref[0]

    coarse = np.linspace(span, -span, int(round(2 * span / (10 * step))) + 1)
    hit = None
    for i, a in enumerate(coarse):
        if exploded(a):
            hit = i
            break
    estimate = None
    if hit is not None:
        if hit == 0:
            estimate = float(coarse[0])
        else:
            fine = np.linspace(coarse[hit - 1], coarse[hit], 11)[1:]
            for a in fine:
                if exploded(a):
                    estimate = float(a)
                    break

    # zero-disparity depth
    depths = np.linspace(-span, span, 101)
    probes = {f"d{i}": s.center + d * b.normal for i, d in enumerate(depths)}
    frames = _hold(sub, faults, Scene(probes=probes), _facing_pose(s, _viewing_distance(rig, s)),
                   None, 5, clock, seed)
    flat = None
    left = _mean_uv(frames, s.name, "left", list(probes))
    right = _mean_uv(frames, s.name, "right", list(probes))
    if left is not None and right is not None:
        du = np.array([left[k][0] - right[k][0] for k in probes])
        sgn = np.sign(du)
        cross = np.flatnonzero(sgn[:-1] != sgn[1:])
        if cross.size:
            i = cross[0]
            flat = float(depths[i] - du[i] * (depths[i + 1] - depths[i]) / (du[i + 1] - du[i]))
            f.add("flat_offset", flat, "m")

    if estimate is None:
        f.notes.append(f"no explosion within +/-{span} m of the screen")
        return f
    f.add("plane_offset", estimate, "m")
    f.add("sampling_step", step, "m")
    _verdict(f, abs(estimate), step, th.plane_offset_m)
    if f.status == FAIL:
        f.evidence.append(f"image exploded with the glasses {estimate:+.4f} m from the screen")
        f.notes.append("explosion position alone cannot separate tracking error from a "
                       "misplaced projection plane")
        if flat is not None:
            if abs(flat - estimate) < 2 * th.plane_offset_m:
                f.notes.append("zero-disparity depth agrees: projection plane misregistered")
            elif abs(flat) < th.plane_offset_m:
                f.notes.append("zero-disparity depth is on the physical screen: "
                               "tracking offset along the screen normal")
    return f


def _default_bend_segments(rig, a_name, b_name, p0, p1):
    sa, sb = rig.screen(a_name), rig.screen(b_name)
    m = 0.5 * (p0 + p1)
    e = geom.unit(p1 - p0)

    def inward(s):
        t = s.center - m
        t = t - (t @ e) * e
        return geom.unit(t)

    ta, tb = inward(sa), inward(sb)
    na, nb = sa.basis.normal, sb.basis.normal
    segs = {}
    for i, (ha, hb) in enumerate([(-1.1, -1.1), (1.1, 1.1), (-0.6, 0.6), (0.6, -0.6)]):
        segs[f"bend{i}"] = (m + 0.9 * ta - 1.5 * na + ha * e, m + 0.9 * tb - 1.5 * nb + hb * e)
    return segs


def _bend_angle(view, xa, xb):
    """Angle between the planes through ``view`` and each screen's image line."""
    def plane_normal(x):
        d = x - view
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        return np.linalg.svd(d)[2][-1]

    na, nb = plane_normal(xa), plane_normal(xb)
    return math.atan2(np.linalg.norm(np.cross(na, nb)), abs(na @ nb)), na, nb


def test_line_bend(rig: RigConfig, faults: FaultSet, pair=None, seed=0, segments=None,
                   samples=33, n_frames=5, eye="left", head=None, thresholds=None):
    """Straight edges crossing a screen join must look straight.

    The bend is measured from the viewer's true eye.  Then a constant
    viewpoint offset is searched that straightens every edge, which is the
    tracking offset; a single edge leaves a plane of offsets unobservable,
    so the default edges are added whenever the given ones do not pin it.
    """
    th = thresholds or Thresholds()
    f = Finding("test_line_bend")
    f.threshold["bend"] = (th.bend_deg, "deg")
    edges = shared_edges(rig)
    if pair is not None:
        edges = [e for e in edges if {e[0], e[1]} == set(pair)]
    if not edges:
        f.notes.append("screens do not share an edge")
        return f
    a_name, b_name, p0, p1 = edges[0]
    f.screen = f"{a_name}|{b_name}"
    sa, sb = rig.screen(a_name), rig.screen(b_name)
    if head is None:
        head = Pose(rig.interior_point + 0.3 * (sa.basis.normal + sb.basis.normal))
    true_eye = geom.derive_eyes(head, rig.ipd, rig.glasses_offset)[EYES.index(eye)]
    clock = _Clock(rig.frame_rate_hz)
    defaults = _default_bend_segments(rig, a_name, b_name, p0, p1)

    def observe(segs):
        scene = Scene(segments=segs, segment_samples=samples)
        frames = _hold(rig, faults, scene, head, None, n_frames, clock, seed)
        out = {}
        for name in segs:
            xa, xb = [], []
            for i in range(samples):
                label = f"{name}#{i}"
                hits = [fr.find(eye, label) for fr in frames]
                if any(h is None for h in hits) or len({h[0] for h in hits}) != 1:
                    continue
                scr = hits[0][0]
                uv = np.mean([h[1].uv for h in hits], axis=0)
                if scr == a_name:
                    xa.append(sa.basis.to_world(*uv))
                elif scr == b_name:
                    xb.append(sb.basis.to_world(*uv))
            if len(xa) >= 2 and len(xb) >= 2:
                out[name] = (np.array(xa), np.array(xb))
        return out

    given = segments if segments is not None else defaults
    obs = observe(given)
    if not obs:
        f.notes.append("no segment crosses the join")
        return f
    normals = np.array([_bend_angle(true_eye, *v)[1] for v in obs.values()])
    sv = np.linalg.svd(normals, compute_uv=False) if len(normals) else np.zeros(1)
    if len(normals) < 3 or sv[-1] < 0.05 * sv[0]:
        null = np.linalg.svd(np.vstack([normals, np.zeros((max(0, 3 - len(normals)), 3))]))[2][-1]
        f.notes.append("given edges leave the offset component along "
                       f"{np.round(null, 3).tolist()} unobservable; default edges added")
        f.add("unobservable_direction", null)
        extra = observe({k: v for k, v in defaults.items() if k not in obs})
        obs = {**obs, **extra}
    bends = {k: math.degrees(_bend_angle(true_eye, *v)[0]) for k, v in obs.items()}
    bend = max(bends.values())

    def objective(c):
        return sum(_bend_angle(true_eye + c, *v)[0] ** 2 for v in obs.values())

    starts = [np.zeros(3)] + [0.2 * np.array([i, j, k]) for i in (-1, 1) for j in (-1, 1)
                              for k in (-1, 1)]
    best = None
    for x0 in starts:
        simplex = np.vstack([x0, x0 + 0.05 * np.eye(3)])
        r = minimize(objective, x0, method="Nelder-Mead",
                     options={"xatol": 1e-4, "fatol": 1e-16, "maxiter": 200,
                              "initial_simplex": simplex})
        if best is None or r.fun < best.fun:
            best = r
        if best.fun < 1e-14:
            break
    # polish from the best start
    r = minimize(objective, best.x, method="Nelder-Mead",
                 options={"xatol": 1e-6, "fatol": 1e-18, "maxiter": 400,
                          "initial_simplex": np.vstack([best.x, best.x + 0.002 * np.eye(3)])})
    if r.fun < best.fun:
        best = r
    f.add("bend", bend, "deg")
    f.add("segment_bends", {k: v for k, v in bends.items()}, "deg")
    f.add("recovered_offset", np.asarray(best.x), "m")
    f.add("residual_bend", math.degrees(math.sqrt(best.fun / max(1, len(obs)))), "deg")
    f.status = FAIL if bend > th.bend_deg else PASS
    if f.status == FAIL:
        f.evidence.append(f"edges bend by {bend:.3f} deg at the {a_name}/{b_name} join; "
                          f"straight from offset {np.round(best.x, 4).tolist()} m")
    return f


def test_horizon(rig: RigConfig, faults: FaultSet, screen=None, seed=0,
                 heights=(1.2, 1.35, 1.5, 1.65, 1.8), n_frames=5, thresholds=None):
    """The horizon over a flat ground plane must stay level with the eyes."""
    th = thresholds or Thresholds()
    f = Finding("test_horizon")
    f.threshold["level"] = (th.horizon_m, "m")
    s = rig.screen(screen) if screen else _primary_screen(rig)
    if s is None or abs(s.basis.up[1]) < 1 - 1e-9:
        f.notes.append("no vertical screen")
        return f
    f.screen = s.name
    b = s.basis
    a0 = _viewing_distance(rig, s)
    clock = _Clock(rig.frame_rate_hz)
    scene = Scene(ground_plane=True)
    true_h, shown_h, level = [], [], []
    for h in heights:
        base = _facing_pose(s, a0)
        head = Pose(base.position + np.array([0.0, h - base.position[1], 0.0]), base.orientation)
        frames = _hold(rig, faults, scene, head, None, n_frames, clock, seed)
        vals = [(fr.screens[s.name].horizon["left"], fr.screens[s.name].horizon["right"])
                for fr in frames]
        if any(v is None for pair in vals for v in pair):
            f.notes.append("horizon not drawn")
            return f
        vl, vr = np.mean(vals, axis=0)
        eyes = geom.derive_eyes(head, rig.ipd, rig.glasses_offset)
        true_h.append(0.5 * (eyes[0][1] + eyes[1][1]))
        shown_h.append(b.origin[1] + 0.5 * (vl + vr) * b.up[1])
        level.append(abs(vl - vr))
    true_h, shown_h = np.array(true_h), np.array(shown_h)
    err = shown_h - true_h
    slope, _ = np.polyfit(true_h, shown_h, 1)
    span = float(np.ptp(true_h))
    resid = err - err.mean()
    f.add("vertical_offset", float(err.mean()), "m")
    f.add("vertical_scale", float(slope))
    f.add("level_dv", float(max(level)), "m")
    unc = float(np.std(resid) / math.sqrt(len(err))) if len(err) > 1 else 0.0
    f.add("uncertainty", unc, "m")
    worst = max(abs(err.mean()), abs(slope - 1) * span, max(level))
    _verdict(f, worst, unc, th.horizon_m)
    if f.status == FAIL:
        f.evidence.append(f"horizon sits {err.mean():+.4f} m from the physical eye height "
                          f"(scale {slope:.4f})")
    return f


def _fit_phase(times, values, freq):
    w = 2 * math.pi * freq
    m = np.column_stack([np.ones_like(times), np.sin(w * times), np.cos(w * times)])
    coef, *_ = np.linalg.lstsq(m, values, rcond=None)
    _, sn, cs = coef
    # displayed ~ sin(w (t - L)) -> lag phase w L
    return math.atan2(-cs, sn) % (2 * math.pi), math.hypot(sn, cs)


def xcorr_latency(times, command, shown, rate, max_lag_s=2.0):
    """Lag (s) maximising the normalised cross-correlation, parabolic peak."""
    c = (command - command.mean()) / command.std()
    d = (shown - shown.mean()) / shown.std()
    n = len(c)
    max_lag = min(int(max_lag_s * rate), n // 2)
    corr = np.array([np.mean(c[:n - k] * d[k:]) for k in range(max_lag + 1)])
    k = int(np.argmax(corr))
    frac = 0.0
    if 0 < k < max_lag:
        y0, y1, y2 = corr[k - 1], corr[k], corr[k + 1]
        den = y0 - 2 * y1 + y2
        if den != 0:
            frac = 0.5 * (y0 - y2) / den
    return (k + frac) / rate


def estimate_latency_phase(rig: RigConfig, faults: FaultSet, screen=None, seed=0, amplitude=0.3,
                           f_min=0.25, f_max=25.0, phase_tol=0.05, f_tol=0.01,
                           thresholds=None):
    """Wag the wand faster until its marker moves in antiphase; the latency
    is then half the wagging period.  A cross-correlation estimate on a
    multi-tone wand path is reported alongside as an independent check."""
    th = thresholds or Thresholds()
    f = Finding("estimate_latency_phase")
    f.threshold["latency"] = (th.latency_s, "s")
    s = rig.screen(screen) if screen else _primary_screen(rig)
    if s is None:
        f.notes.append("no wall screen")
        return f
    f.screen = s.name
    b = s.basis
    sub = dataclasses.replace(rig, screens=[s])
    head = _facing_pose(s, _viewing_distance(rig, s))
    center = s.center + 0.9 * b.normal
    scene = Scene(wand_marker=True)
    t0 = 2.5

    def marker_series(traj, duration):
        frames = simulate(sub, faults, scene, traj, duration, seed, t0)
        t, u = [], []
        for fr in frames:
            sp = fr.image(s.name, "left", "wand")
            if sp is not None:
                t.append(fr.time)
                u.append(sp.u)
        return np.array(t), np.array(u), frames

    def lag_phase(freq):
        traj = Trajectory.wag(head, center, b.right, amplitude, freq)
        t, u, frames = marker_series(traj, max(3.0 / freq, 2.0))
        if len(t) < 0.9 * len(frames):
            return math.nan
        return _fit_phase(t, u, freq)[0]

    # independent check: cross-correlate a multi-tone wand path
    tones = [(0.31, 0.12), (0.53, 0.1), (0.97, 0.08)]

    def multitone(t):
        x = sum(a * math.sin(2 * math.pi * fr * t + i) for i, (fr, a) in enumerate(tones))
        return head, Pose(center + x * b.right)

    t, u, frames = marker_series(Trajectory(multitone, 8.0, "multitone"), 8.0)
    if len(t) < 0.9 * len(frames):
        f.notes.append("wand marker not visible")
        return f
    cmd = np.array([(multitone(tt)[1].position - center) @ b.right for tt in t])
    xc = xcorr_latency(t, cmd, u, rig.frame_rate_hz)
    f.add("latency_xcorr", xc, "s")

    freqs = np.geomspace(f_min, f_max, 34)
    prev_f, prev_p = None, None
    bracket = None
    for fr in freqs:
        p = lag_phase(fr)
        if prev_p is not None and prev_p < math.pi <= p and p - prev_p < math.pi:
            bracket = (prev_f, fr)
            break
        prev_f, prev_p = fr, p
    if bracket is None:
        if xc < 1.0 / (2 * f_max):
            f.status = PASS
            f.add("latency", xc, "s")
            f.notes.append(f"no antiphase below {f_max} Hz: latency under "
                           f"{1000 / (2 * f_max):.0f} ms")
        else:
            f.notes.append(f"no antiphase found in [{f_min}, {f_max}] Hz")
        return f
    lo, hi = bracket
    while hi - lo > f_tol:
        mid = 0.5 * (lo + hi)
        if lag_phase(mid) < math.pi:
            lo = mid
        else:
            hi = mid
    fstar = 0.5 * (lo + hi)
    phase = lag_phase(fstar)
    f.add("antiphase_frequency", fstar, "Hz")
    f.add("phase_at_antiphase", phase, "rad")
    if abs(phase - math.pi) >= phase_tol:
        f.notes.append(f"phase {phase:.3f} rad at {fstar:.2f} Hz is not within {phase_tol} of pi")
        return f
    latency = 1.0 / (2 * fstar)
    f.add("latency", latency, "s")
    # bisection width maps to a latency interval
    unc = latency * f_tol / fstar
    _verdict(f, latency, unc, th.latency_s)
    if f.status == FAIL:
        f.evidence.append(f"marker in antiphase at {fstar:.2f} Hz: latency {1000 * latency:.1f} ms "
                          f"(cross-correlation {1000 * xc:.1f} ms)")
    return f


def test_wand_attachment(rig: RigConfig, faults: FaultSet, screen=None, seed=0, speed=0.5,
                         radius=0.3, periods=2, thresholds=None):
    """Carry the wand round a circle and compare the marker with the wand.

    The marker is located by triangulating its two displayed images from
    the true eyes.  The along-track component of the error is the dynamic
    lag; its mean vector over whole laps is the static bias; what remains
    is scatter.
    """
    th = thresholds or Thresholds()
    f = Finding("test_wand_attachment")
    f.threshold["lag"] = (th.wand_lag_m, "m")
    s = rig.screen(screen) if screen else _primary_screen(rig)
    if s is None:
        f.notes.append("no wall screen")
        return f
    f.screen = s.name
    b = s.basis
    sub = dataclasses.replace(rig, screens=[s])
    head = _facing_pose(s, _viewing_distance(rig, s))
    eye_l, eye_r = geom.derive_eyes(head, rig.ipd, rig.glasses_offset)
    traj = Trajectory.circle(head, s.center + 0.9 * b.normal, radius, speed, b.normal)
    duration = periods * 2 * math.pi * radius / speed
    n = int(math.floor(duration * rig.frame_rate_hz))
    frames = simulate(sub, faults, Scene(wand_marker=True), traj,
                      (n - 1) / rig.frame_rate_hz + 1e-12, seed, 2.5)[:n]
    errs, vdirs = [], []
    for fr in frames:
        pl, pr = fr.image(s.name, "left", "wand"), fr.image(s.name, "right", "wand")
        if pl is None or pr is None:
            continue
        seen = _triangulate(eye_l, b.to_world(*pl.uv), eye_r, b.to_world(*pr.uv))
        truth = fr.truth[1].position
        h = 1e-4
        vel = traj.wand(fr.time + h).position - traj.wand(fr.time - h).position
        errs.append(seen - truth)
        vdirs.append(vel / np.linalg.norm(vel))
    if len(errs) < 10:
        f.notes.append("wand marker not visible")
        return f
    errs, vdirs = np.array(errs), np.array(vdirs)
    along = -np.sum(errs * vdirs, axis=1)
    lag = float(along.mean())
    bias = errs.mean(axis=0)
    noise = errs - bias + lag * vdirs
    scatter = float(math.sqrt(np.mean(np.sum(noise ** 2, axis=1)) / 3))
    f.add("max_distance", float(np.max(np.linalg.norm(errs, axis=1))), "m")
    f.add("lag", lag, "m")
    f.add("implied_latency", lag / speed, "s")
    f.add("static_bias", float(np.linalg.norm(bias)), "m")
    f.add("scatter", scatter, "m")
    unc = scatter / math.sqrt(len(errs))
    _verdict(f, max(abs(lag), float(np.linalg.norm(bias))), unc, th.wand_lag_m)
    if f.status == FAIL:
        f.evidence.append(f"marker trails the wand by {lag:.4f} m and sits "
                          f"{np.linalg.norm(bias):.4f} m off on average")
    return f


def estimate_jitter(rig: RigConfig, faults: FaultSet, screen=None, seed=0, duration=10.0,
                    thresholds=None):
    """Hold the glasses still and measure the spread of the reconstructed viewpoint."""
    th = thresholds or Thresholds()
    f = Finding("estimate_jitter")
    f.threshold["sigma"] = (th.jitter_m, "m")
    s = rig.screen(screen) if screen else _primary_screen(rig)
    if s is None:
        f.notes.append("no wall screen")
        return f
    f.screen = s.name
    sub = dataclasses.replace(rig, screens=[s])
    probes = _reconstruction_probes(s)
    head = _facing_pose(s, _viewing_distance(rig, s))
    frames = simulate(sub, faults, Scene(probes=probes), Trajectory.static(head), duration, seed)
    views = []
    for fr in frames:
        uv = {k: fr.image(s.name, "left", k) for k in probes}
        if any(v is None for v in uv.values()):
            continue
        views.append(_viewpoint_from_images(s, probes, {k: v.uv for k, v in uv.items()}))
    if len(views) < 3:
        f.notes.append("probes not visible")
        return f
    views = np.array(views)
    sigma = views.std(axis=0, ddof=1)
    f.add("sigma", sigma, "m")
    f.add("sigma_rms", float(np.sqrt(np.mean(sigma ** 2))), "m")
    f.add("samples", len(views))
    unc = float(sigma.max() / math.sqrt(2 * (len(views) - 1)))
    f.add("sigma_uncertainty", unc, "m")
    _verdict(f, float(sigma.max()), unc, th.jitter_m)
    if f.status == FAIL:
        f.evidence.append(f"viewpoint jitter {np.round(sigma * 1000, 2).tolist()} mm per axis")
    return f


def _render_uv(s, eye, p):
    return np.array(geom.project_uv(eye, s.basis, p))


def test_fixed_marker(rig: RigConfig, faults: FaultSet, seed=0, marker=(0.0, 1.524, 0.0),
                      head=None, n_frames=30, thresholds=None):
    """Marker 5 ft above the floor origin.

    Reports where the marker appears (triangulated from the true eyes) and
    the tracking error that explains the displayed images, found by solving
    for the viewpoint offset that reproduces them on the nominal screens.
    """
    th = thresholds or Thresholds()
    f = Finding("test_fixed_marker")
    f.threshold["error"] = (th.fixed_marker_m, "m")
    marker = geom.vec3(marker)
    if head is None:
        head = Pose(marker + np.array([0.0, 0.076, 0.9]))
    elif not isinstance(head, Pose):
        head = Pose(head)
    clock = _Clock(rig.frame_rate_hz)
    frames = _hold(rig, faults, Scene(probes={"marker": marker}), head, None, n_frames, clock, seed)
    eyes = geom.derive_eyes(head, rig.ipd, rig.glasses_offset)
    per_eye = []
    for eye_name in EYES:
        hits = [fr.find(eye_name, "marker") for fr in frames]
        if any(h is None for h in hits) or len({h[0] for h in hits}) != 1:
            f.notes.append("marker not visible on a single screen")
            return f
        per_eye.append((rig.screen(hits[0][0]), np.array([h[1].uv for h in hits])))
    f.screen = per_eye[0][0].name if per_eye[0][0] is per_eye[1][0] else None

    xs = [s.basis.to_world(*uv.mean(axis=0)) for s, uv in per_eye]
    seen = _triangulate(eyes[0], xs[0], eyes[1], xs[1])
    f.add("apparent_position", seen, "m")
    f.add("apparent_error", float(np.linalg.norm(seen - marker)), "m")

    def solve(uvs):
        def resid(o):
            return np.concatenate([_render_uv(s, eye + o, marker) - uv
                                   for (s, _), eye, uv in zip(per_eye, eyes, uvs)])
        return gauss_newton(resid, np.zeros(3), tol=1e-10)[0]

    try:
        offset = solve([uv.mean(axis=0) for _, uv in per_eye])
        per_frame = np.array([solve([uv[k] for _, uv in per_eye]) for k in range(n_frames)])
    except (UnobservableError, ValueError) as exc:
        f.notes.append(f"tracking error not recoverable: {exc}")
        return f
    unc = float(np.linalg.norm(per_frame.std(axis=0)) / math.sqrt(n_frames))
    err = float(np.linalg.norm(offset))
    f.add("tracking_error", err, "m")
    f.add("tracking_offset", offset, "m")
    f.add("uncertainty", unc, "m")
    _verdict(f, err, unc, th.fixed_marker_m)
    if f.status == FAIL:
        f.evidence.append(f"marker displaced; tracking error {err:.4f} m at the viewing position")
    return f


def test_edge_match(rig: RigConfig, faults: FaultSet, pair=None, seed=0, n_probes=21,
                    thresholds=None):
    """Points on a shared physical edge must be drawn at the same place by
    both projectors."""
    th = thresholds or Thresholds()
    f = Finding("test_edge_match")
    f.threshold["gap"] = (th.edge_gap_m, "m")
    edges = shared_edges(rig)
    if pair is not None:
        edges = [e for e in edges if {e[0], e[1]} == set(pair)]
    if not edges:
        f.notes.append("screens do not share an edge")
        return f
    head = Pose(rig.interior_point)
    frame = render_frame(0.0, rig, faults, Scene(), Trajectory.static(head), seed)
    worst = 0.0
    for a_name, b_name, p0, p1 in edges:
        sa, sb = rig.screen(a_name), rig.screen(b_name)
        pts = p0 + np.linspace(0, 1, n_probes)[:, None] * (p1 - p0)
        gap = 0.0
        for eye in frame.eyes.values():
            uva, va = display_uv(sa, faults.for_screen(a_name), eye, pts)
            uvb, vb = display_uv(sb, faults.for_screen(b_name), eye, pts)
            ok = va & vb
            if not np.any(ok):
                continue
            xa = sa.basis.origin + uva[ok, :1] * sa.basis.right + uva[ok, 1:] * sa.basis.up
            xb = sb.basis.origin + uvb[ok, :1] * sb.basis.right + uvb[ok, 1:] * sb.basis.up
            gap = max(gap, float(np.max(np.linalg.norm(xa - xb, axis=1))))
        f.add(f"{a_name}|{b_name}.gap", gap, "m")
        if gap > th.edge_gap_m:
            f.evidence.append(f"{a_name}/{b_name} edge mismatch {gap * 1000:.2f} mm")
        worst = max(worst, gap)
    f.add("max_gap", worst, "m")
    f.status = FAIL if worst > th.edge_gap_m else PASS
    return f


SUITE_ORDER = (
    "test_parallax_orientation", "test_shrink", "test_horizon", "test_line_bend",
    "test_fixed_marker", "test_stereo_phase", "locate_projection_plane",
    "estimate_latency_phase", "test_wand_attachment", "estimate_jitter", "test_edge_match",
)


def run_suite(rig: RigConfig, faults: FaultSet, seed=0, thresholds=None, digests=None):
    """All tests, grouped in the order: tracker orientation, position offset,
    stereo phase, projection plane, latency, edge matching.

    ``digests`` is an optional (rig_digest, faults_digest) pair; computed
    from the configurations when omitted.
    """
    from .io import digest_faults, digest_rig

    faults.validate_against(rig)
    kw = {"seed": seed, "thresholds": thresholds}
    findings = [
        test_parallax_orientation(rig, faults, **kw),
        test_shrink(rig, faults, **kw),
        test_horizon(rig, faults, **kw),
        test_line_bend(rig, faults, **kw),
        test_fixed_marker(rig, faults, **kw),
        test_stereo_phase(rig, faults, **kw),
    ]
    findings += [locate_projection_plane(rig, faults, s.name, **kw) for s in rig.screens]
    findings += [
        estimate_latency_phase(rig, faults, **kw),
        test_wand_attachment(rig, faults, **kw),
        estimate_jitter(rig, faults, **kw),
        test_edge_match(rig, faults, **kw),
    ]
    if digests is None:
        digests = (digest_rig(rig), digest_faults(faults))
    return DiagnosticReport(digests[0], digests[1], findings, seed)
