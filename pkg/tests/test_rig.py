import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cavesim import geom
from cavesim.calib import DistortionGrid
from cavesim.errors import ConfigurationError
from cavesim.geom import Pose
from cavesim.rig import (FaultSet, JitterSource, Scene, ScreenFaults, Trajectory, cave,
                         render_frame, report_pose, simulate, splitmix64)

from conftest import oracle_uv


def test_zero_faults_report_identity():
    p = Pose((0.3, 1.2, -0.4), geom.quat_from_axis_angle((0, 1, 0), 0.3))
    rep = report_pose(lambda t: p, 0.5, FaultSet())
    np.testing.assert_array_equal(rep.position, p.position)
    np.testing.assert_array_equal(rep.orientation, p.orientation)


def test_latency_lags_moving_head():
    traj = Trajectory.linear(Pose((0, 1.5, 0)), (0.5, 0, 0))
    rep = report_pose(traj.head, 1.0, FaultSet(latency_s=0.1))
    np.testing.assert_allclose(traj.head(1.0).position - rep.position, (0.05, 0, 0), atol=1e-15)


def test_latency_clamps_at_start():
    traj = Trajectory.linear(Pose((0, 1.5, 0)), (0.5, 0, 0))
    rep = report_pose(traj.head, 0.05, FaultSet(latency_s=0.1))
    np.testing.assert_array_equal(rep.position, (0, 1.5, 0))


def test_constant_offset():
    rep = report_pose(lambda t: Pose((0, 1.5, 0)), 0.0, FaultSet(tracker_offset=(0.05, 0, 0)))
    np.testing.assert_allclose(rep.position, (0.05, 1.5, 0))


def test_composition_order():
    # grid sampled at the lagged true position, then the offset, then jitter
    grid = DistortionGrid.from_function(lambda p: np.array([0.1 * p[0], 0, 0]),
                                        (-2, -2, -2), (2, 4, 2), (5, 5, 5))
    traj = Trajectory.linear(Pose((0, 1.5, 0)), (1.0, 0, 0))
    f = FaultSet(tracker_offset=(0, 0.02, 0), distortion=grid, latency_s=0.25,
                 jitter_sigma=0.001)
    js = JitterSource(7, "head")
    rep = report_pose(traj.head, 1.0, f, js)
    lagged = np.array([0.75, 1.5, 0])
    expect = lagged + (0.075, 0, 0) + (0, 0.02, 0) + 0.001 * js.normal3(1.0)
    np.testing.assert_allclose(rep.position, expect, atol=1e-15)


def test_orientation_only_lags():
    q = lambda t: geom.quat_from_axis_angle((0, 1, 0), t)
    f = FaultSet(tracker_offset=(1, 1, 1), latency_s=0.2, jitter_sigma=0.1)
    rep = report_pose(lambda t: Pose((0, 0, 0), q(t)), 1.0, f, JitterSource(0, "head"))
    np.testing.assert_allclose(rep.orientation, q(0.8), atol=1e-15)


@given(st.integers(1, 20), st.floats(0.0, 5.0), st.floats(-2, 2), st.floats(0.1, 4))
def test_latency_exactness(k, t, v, w):
    lat = k / 60.0

    def pose(tt):
        return Pose((v * math.sin(w * tt), 1.5 + 0.1 * tt, v * tt * tt))

    rep = report_pose(pose, t, FaultSet(latency_s=lat))
    np.testing.assert_array_equal(rep.position, pose(max(0.0, t - lat)).position)


def test_splitmix64_reference():
    # first outputs of the reference generator seeded with 0
    s, a = splitmix64(0)
    _, b = splitmix64(s)
    assert a == 0xE220A8397B1DCDAF
    assert b == 0x6E789E6AA1B965F4


def test_jitter_streams_independent_and_keyed():
    a, b = JitterSource(1, "head"), JitterSource(1, "wand")
    assert not np.allclose(a.normal3(0.5), b.normal3(0.5))
    np.testing.assert_array_equal(a.normal3(0.5), JitterSource(1, "head").normal3(0.5))
    assert not np.allclose(a.normal3(0.5), JitterSource(2, "head").normal3(0.5))


def test_jitter_std_static_pose():
    f = FaultSet(jitter_sigma=0.002)
    js = JitterSource(0, "head")
    pts = np.array([report_pose(lambda t: Pose((0, 1.5, 0)), k / 60, f, js).position
                    for k in range(600)])
    std = pts.std(axis=0, ddof=1)
    assert np.all(np.abs(std - 0.002) < 0.15 * 0.002), std


def test_frame_count_and_parity(rig):
    frames = simulate(rig, FaultSet(), Scene(), Trajectory.static(Pose((0, 1.5, 0))), 1.0)
    assert len(frames) == 61
    assert frames[1].time == pytest.approx(1 / 60)
    assert [f.field_parity for f in frames[:3]] == ["left", "left", "left"]
    f = render_frame(1 / 120, rig, FaultSet(), Scene(), Trajectory.static(Pose((0, 1.5, 0))))
    assert f.field_parity == "right"


def test_simulate_requires_positive_duration(rig):
    with pytest.raises(ValueError):
        simulate(rig, FaultSet(), Scene(), Trajectory.static(Pose((0, 1.5, 0))), 0)


def test_determinism(rig):
    f = FaultSet(jitter_sigma=0.003, latency_s=0.05)
    scene = Scene(probes={"p": (0.2, 1.4, -2.5)}, wand_marker=True)
    traj = Trajectory.wag(Pose((0, 1.5, 0.3)), (0, 1.2, -0.5), (1, 0, 0), 0.3, 2.0)
    a = [fr.to_dict() for fr in simulate(rig, f, scene, traj, 0.5, seed=4)]
    b = [fr.to_dict() for fr in simulate(rig, f, scene, traj, 0.5, seed=4)]
    c = [fr.to_dict() for fr in simulate(rig, f, scene, traj, 0.5, seed=5)]
    assert a == b
    assert a != c


@given(st.floats(-1.0, 1.0), st.floats(0.5, 2.5), st.floats(-1.0, 1.0),
       st.floats(-1.4, 1.4), st.floats(0.1, 2.9), st.floats(0.2, 4.0))
def test_zero_fault_transparency(ex, ey, ez, px, py, b):
    r = cave()
    head = Pose((ex, ey, ez))
    p = np.array([px, py, -1.5 - b])
    frame = render_frame(0.0, r, FaultSet(), Scene(probes={"p": p}), Trajectory.static(head))
    front = r.screen("front")
    eyes = geom.derive_eyes(head, r.ipd)
    for name, eye in zip(("left", "right"), eyes):
        sp = frame.image("front", name, "p")
        uv = oracle_uv(eye, front, p)
        if sp is None:
            # dropped only when outside the clip margin
            assert not (np.all(uv >= -0.3) and np.all(uv <= 3.3))
            continue
        assert abs(sp.u - uv[0]) < 1e-12 and abs(sp.v - uv[1]) < 1e-12


def test_every_point_on_exactly_one_screen(rig):
    pts = {f"p{i}": p for i, p in enumerate(
        np.random.default_rng(0).uniform((-4, -1, -4), (4, 4, 4), (200, 3)))}
    frame = render_frame(0.0, rig, FaultSet(), Scene(probes=pts),
                         Trajectory.static(Pose((0.2, 1.5, 0.1))))
    for eye in ("left", "right"):
        seen = [k for s in rig.screen_names for k in frame.screens[s].images[eye]]
        assert len(seen) == len(set(seen))


def test_on_plane_probe_zero_disparity(rig):
    frame = render_frame(0.0, rig, FaultSet(), Scene(probes={"p": (0.3, 1.1, -1.5)}),
                         Trajectory.static(Pose((0, 1.5, 0))))
    l, r = frame.image("front", "left", "p"), frame.image("front", "right", "p")
    assert (l.u, l.v) == pytest.approx((r.u, r.v), abs=1e-12)


def test_eye_swap_right_screen_only(rig):
    f = FaultSet(screens={"right": ScreenFaults(eye_swap=True)})
    scene = Scene(probes={"front_p": (0, 1.5, -3.0), "right_p": (3.0, 1.5, 0)})
    head = Pose((0, 1.5, 0), geom.quat_from_axis_angle((0, 1, 0), -math.pi / 2))
    frame = render_frame(0.0, rig, f, scene, Trajectory.static(Pose((0, 1.5, 0))))
    du_front = frame.image("front", "left", "front_p").u - frame.image("front", "right", "front_p").u
    assert du_front < 0
    # facing the right wall so its eye baseline runs along its u axis
    frame = render_frame(0.0, rig, f, scene, Trajectory.static(head))
    du_right = frame.image("right", "left", "right_p").u - frame.image("right", "right", "right_p").u
    assert du_right > 0


def test_plane_shift_gives_disparity_on_true_plane(rig):
    f = FaultSet(screens={"front": ScreenFaults(plane_shift=0.1)})
    frame = render_frame(0.0, rig, f, Scene(probes={"p": (0, 1.5, -1.5)}),
                         Trajectory.static(Pose((0, 1.5, 0))))
    du = frame.image("front", "left", "p").u - frame.image("front", "right", "p").u
    # believed plane 0.1 m nearer: probe now 0.1 m behind it, a = 1.4
    assert du == pytest.approx(-0.065 * 0.1 / 1.5, abs=1e-12)


def test_projector_affine_in_screen_metres(rig):
    a = [[1, 0, 0.002], [0, 1, 0]]
    f = FaultSet(screens={"front": ScreenFaults(projector_affine=a)})
    scene = Scene(probes={"p": (0.1, 1.2, -2.0)})
    head = Trajectory.static(Pose((0, 1.5, 0)))
    f0 = render_frame(0.0, rig, FaultSet(), scene, head)
    f1 = render_frame(0.0, rig, f, scene, head)
    assert f1.image("front", "left", "p").u - f0.image("front", "left", "p").u == \
        pytest.approx(0.002, abs=1e-12)


def test_explosion_flag_not_crash(rig):
    f = FaultSet(screens={"front": ScreenFaults(plane_shift=1.6)})
    frame = render_frame(0.0, rig, f, Scene(probes={"p": (0, 1.5, -3)}),
                         Trajectory.static(Pose((0, 1.5, 0))))
    assert frame.screens["front"].exploded
    assert frame.screens["front"].images["left"] == {}


def test_horizon_at_eye_height(rig):
    frame = render_frame(0.0, rig, FaultSet(), Scene(ground_plane=True),
                         Trajectory.static(Pose((0, 1.5, 0))))
    assert frame.screens["front"].horizon["left"] == pytest.approx(1.5)
    assert frame.screens["floor"].horizon["left"] is None


def test_wand_marker_at_reported_wand(rig):
    f = FaultSet(tracker_offset=(0.05, 0, 0))
    traj = Trajectory.static(Pose((0, 1.5, 0)), Pose((0, 1.2, -0.8)))
    frame = render_frame(0.0, rig, f, Scene(wand_marker=True), traj)
    np.testing.assert_allclose(frame.reported[1].position, (0.05, 1.2, -0.8))
    np.testing.assert_allclose(frame.truth[1].position, (0, 1.2, -0.8))
    eye = frame.eyes["left"]
    uv = oracle_uv(eye, rig.screen("front"), (0.05, 1.2, -0.8))
    assert frame.image("front", "left", "wand").uv == pytest.approx(tuple(uv), abs=1e-12)


def test_fault_validation(rig):
    with pytest.raises(ConfigurationError):
        FaultSet(jitter_sigma=-1)
    with pytest.raises(ConfigurationError):
        FaultSet(latency_s=-0.1)
    with pytest.raises(ConfigurationError):
        ScreenFaults(ghost_leak=1.0)
    with pytest.raises(ConfigurationError):
        FaultSet(screens={"front": ScreenFaults(genlock_break_row=1024)}).validate_against(rig)
    with pytest.raises(ConfigurationError):
        FaultSet(screens={"ceiling": ScreenFaults()}).validate_against(rig)
    with pytest.raises(ConfigurationError):
        Scene(probes={"wand": (0, 0, 0)}, wand_marker=True)
