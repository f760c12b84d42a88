import hashlib
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cavesim.errors import AmbiguousBreakError, ConfigurationError
from cavesim.pattern import (PatternSpec, RasterImage, check_grid_linearity, compare_color,
                             detect_genlock_break, estimate_ghosting, generate_pattern, read_ppm,
                             simulate_capture, stereo_swapped, write_ppm)
from cavesim.rig import ScreenFaults, cave

GOLDEN_FRONT_LEFT = "3fbf882051ea919e79d5da20121b2cae5b0a1d6643dfc2a7769b2b1a1ca163cd"


@pytest.fixture(scope="module")
def pair(front):
    return generate_pattern(front, eye="left"), generate_pattern(front, eye="right")


def _white_cols(img, row):
    return np.flatnonzero(np.all(img.pixels[row] == 255, axis=1))


def test_grid_columns(pair):
    left, _ = pair
    step = Decimal(1024) * Decimal("0.1524") / Decimal(3)
    want = [int((k * step).quantize(Decimal(1), ROUND_HALF_UP)) for k in range(20)]
    assert want[:3] == [0, 52, 104]
    # a row away from the bands and the grid rows
    np.testing.assert_array_equal(_white_cols(left, 30), want)


def test_grid_rows(pair):
    left, _ = pair
    rows = np.flatnonzero(np.all(left.pixels[:, 30] == 255, axis=1))
    assert rows[0] == 0 and rows[1] == 52 and len(rows) >= 15


def test_eye_bars_exclusive(pair):
    spec = PatternSpec()
    left, right = pair
    ca, cb = spec.bar_columns(1024, "a"), spec.bar_columns(1024, "b")
    assert np.all(left.pixels[:, ca, 1] == 255)
    assert not np.any(left.pixels[:, cb])
    assert np.all(right.pixels[:, cb, 1] == 255)
    assert not np.any(right.pixels[:, ca])


def test_bars_span_full_height(pair):
    left, _ = pair
    col = PatternSpec().bar_columns(1024, "a")[0]
    assert np.all(left.pixels[:, col] == (0, 255, 0))


def test_golden_checksum(front, pair):
    assert hashlib.sha256(write_ppm(pair[0])).hexdigest() == GOLDEN_FRONT_LEFT
    again = generate_pattern(front, eye="left")
    assert write_ppm(again) == write_ppm(pair[0])


def test_spacing_below_two_pixels(front):
    with pytest.raises(ConfigurationError):
        generate_pattern(front, PatternSpec(grid_spacing=0.005))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        PatternSpec(grid_spacing=0)
    with pytest.raises(ConfigurationError):
        PatternSpec(bars_a=(0.2,), bars_b=(0.2,))


# -- capture -------------------------------------------------------------------

def test_no_faults_identity(pair):
    sl, sr = simulate_capture(*pair, ScreenFaults())
    assert sl == pair[0] and sr == pair[1]


def test_break_row_400_swaps_upper_rows(pair):
    sl, sr = simulate_capture(*pair, ScreenFaults(genlock_break_row=400))
    np.testing.assert_array_equal(sl.pixels[:400], pair[0].pixels[:400])
    np.testing.assert_array_equal(sl.pixels[400:], pair[1].pixels[400:])
    np.testing.assert_array_equal(sr.pixels[400:], pair[0].pixels[400:])


def test_ghost_pixel_values(pair):
    spec = PatternSpec()
    sl, sr = simulate_capture(*pair, ScreenFaults(ghost_leak=0.1))
    ca = spec.bar_columns(1024, "a")[0]
    assert sl.pixels[10, ca, 1] == 230  # 0.9 * 255 = 229.5
    assert sr.pixels[10, ca, 1] == 26   # 0.1 * 255 = 25.5, half rounds up


@pytest.mark.parametrize("row", [1, 2, 400, 511, 1022, 1023])
def test_detect_break_exact(pair, row):
    sl, sr = simulate_capture(*pair, ScreenFaults(genlock_break_row=row))
    assert detect_genlock_break(sl, sr) == row
    assert not stereo_swapped(sl, sr)


def test_no_break(pair):
    sl, sr = simulate_capture(*pair)
    assert detect_genlock_break(sl, sr) is None
    assert not stereo_swapped(sl, sr)


def test_break_zero_is_swap(pair):
    sl, sr = simulate_capture(*pair, ScreenFaults(genlock_break_row=0))
    assert detect_genlock_break(sl, sr) is None
    assert stereo_swapped(sl, sr)


def test_ambiguous_break(pair):
    sl, sr = simulate_capture(*pair, ScreenFaults(genlock_break_row=300))
    p = sl.pixels.copy()
    p[700:] = pair[0].pixels[700:]
    with pytest.raises(AmbiguousBreakError) as exc:
        detect_genlock_break(RasterImage(p), sr)
    assert 300 in exc.value.candidates and 700 in exc.value.candidates


@settings(max_examples=40)
@given(st.integers(0, 1023), st.sampled_from([None, 0.0, 0.2]))
def test_detector_soundness(row, g):
    s = cave().screen("front")
    left, right = _cached_pair(s)
    brk = None if g is None else row
    sl, sr = simulate_capture(left, right, ScreenFaults(genlock_break_row=brk,
                                                        ghost_leak=g or 0.0))
    found = detect_genlock_break(sl, sr)
    if brk is None or brk == 0:
        assert found is None
    else:
        assert found == brk


_PAIR = {}


def _cached_pair(s):
    if "p" not in _PAIR:
        _PAIR["p"] = generate_pattern(s, eye="left"), generate_pattern(s, eye="right")
    return _PAIR["p"]


@pytest.mark.parametrize("g,tol", [(0.0, 1 / 255), (0.1, 0.004), (0.3, 0.004)])
def test_ghost_estimates(pair, g, tol):
    sl, sr = simulate_capture(*pair, ScreenFaults(ghost_leak=g))
    assert abs(estimate_ghosting(sl, sr) - g) <= tol


def test_ghost_monotone_and_bounded(pair):
    gs = np.linspace(0, 0.49, 15)
    est = [estimate_ghosting(*simulate_capture(*pair, ScreenFaults(ghost_leak=g))) for g in gs]
    assert all(b > a for a, b in zip(est, est[1:]))
    # 1/255 plus half a level of quantisation relative to the bar level
    assert all(abs(e - g) <= 1 / 255 + 0.5 / 255 + 1e-12 for e, g in zip(est, gs))


def test_color_identical(pair):
    ratios, flagged = compare_color(pair[0], pair[0])
    assert ratios == pytest.approx((1, 1, 1)) and not flagged


def test_color_blue_gain(pair):
    seen_b, _ = simulate_capture(*pair, ScreenFaults(color_gain=(1, 1, 0.8)))
    ratios, flagged = compare_color(pair[0], seen_b)
    assert ratios[:2] == pytest.approx((1, 1))
    assert abs(ratios[2] - 0.8) <= 0.01 and flagged


def test_color_saturation_excluded(pair):
    seen_b, _ = simulate_capture(*pair, ScreenFaults(color_gain=(1.5, 1, 1)))
    assert np.any(seen_b.pixels[..., 0] == 255)
    ratios, _ = compare_color(pair[0], seen_b)
    assert abs(ratios[0] - 1.5) <= 0.01


def test_linearity_identity(front, pair):
    dev, fit = check_grid_linearity(pair[0], screen=front)
    assert dev < 0.5
    np.testing.assert_allclose(fit, [[1, 0, 0], [0, 1, 0]], atol=1e-6)


def test_linearity_shift(front, pair):
    shift = 2 * 3 / 1024  # 2 px in metres
    seen, _ = simulate_capture(*pair, ScreenFaults(projector_affine=[[1, 0, shift], [0, 1, 0]]),
                               front)
    dev, fit = check_grid_linearity(seen, screen=front)
    assert abs(fit[0, 2] - 2) <= 0.2 and dev < 0.5


def test_linearity_scale(front, pair):
    seen, _ = simulate_capture(*pair, ScreenFaults(projector_affine=[[1.01, 0, 0], [0, 1.01, 0]]),
                               front)
    _, fit = check_grid_linearity(seen, screen=front)
    assert abs(fit[0, 0] - 1.01) <= 0.002 and abs(fit[1, 1] - 1.01) <= 0.002


# -- PPM -------------------------------------------------------------------------

def test_black_8x8_ppm():
    data = write_ppm(RasterImage.black(8, 8))
    header = b"P6\n8 8\n255\n"
    assert data[:len(header)] == header
    assert len(data) == len(header) + 192
    assert data[len(header):] == bytes(192)


def test_ppm_rows_top_first():
    px = np.zeros((8, 8, 3), dtype=np.uint8)
    px[0, 0] = (1, 2, 3)  # bottom-left
    data = write_ppm(RasterImage(px))
    assert data[-24:-21] == bytes((1, 2, 3))


def test_ppm_round_trip(pair):
    assert read_ppm(write_ppm(pair[1])) == pair[1]


@given(arrays(np.uint8, st.tuples(st.integers(8, 24), st.integers(8, 24), st.just(3))))
def test_ppm_round_trip_property(px):
    img = RasterImage(px)
    assert read_ppm(write_ppm(img)) == img


def test_ppm_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        read_ppm(b"P3\n8 8\n255\n")
    with pytest.raises(ConfigurationError):
        read_ppm(b"P6\n8 8\n255\n" + bytes(10))
