"""Standalone video test pattern and analysis of simulated captures.

Rasters are (height, width, 3) uint8 arrays with row 0 at the *bottom*, so
pixel (col, row) sits at screen coordinates ((col + 0.5) * W / pw,
(row + 0.5) * H / ph).  PPM files store rows top first; the flip happens in
:func:`write_ppm` / :func:`read_ppm`.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import AmbiguousBreakError, ConfigurationError
from .geom import ScreenRect
from .rig import ScreenFaults

WHITE = (255, 255, 255)
BAR_GREEN = (0, 255, 0)
# 75% level keeps moderate colour gains from clipping
COLORBARS = tuple(tuple(191 * c for c in rgb) for rgb in
                  [(1, 1, 1), (1, 1, 0), (0, 1, 1), (0, 1, 0), (1, 0, 1), (1, 0, 0), (0, 0, 1),
                   (0, 0, 0)])


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=float) + 0.5 + 1e-9).astype(np.int64)


@dataclass
class RasterImage:
    pixels: np.ndarray  # (h, w, 3) uint8, row 0 at the bottom

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ConfigurationError("pixels must be (height, width, 3)", "raster")
        if self.pixels.dtype != np.uint8:
            raise ConfigurationError("pixels must be uint8", "raster")
        if self.width < 8 or self.height < 8:
            raise ConfigurationError("raster must be at least 8x8", "raster")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def black(cls, width, height):
        return cls(np.zeros((height, width, 3), dtype=np.uint8))

    def __eq__(self, other):
        return isinstance(other, RasterImage) and np.array_equal(self.pixels, other.pixels)


@dataclass
class PatternSpec:
    grid_spacing: float = 0.1524          # m
    line_width: int = 1                   # px
    colorbar_rows: tuple = (0.40, 0.48)   # fraction of height
    ramp_rows: tuple = (0.48, 0.52)
    bars_a: tuple = (0.22, 0.47, 0.72)    # left-eye bar centres, fraction of width
    bars_b: tuple = (0.28, 0.53, 0.78)    # right-eye bar centres
    bar_width: int = 8                    # px

    def __post_init__(self):
        if not self.grid_spacing > 0:
            raise ConfigurationError("must be positive", "grid_spacing")
        if self.line_width < 1:
            raise ConfigurationError("must be >= 1", "line_width")
        if self.bar_width < 1:
            raise ConfigurationError("must be >= 1", "bar_width")
        if set(self.bars_a) & set(self.bars_b):
            raise ConfigurationError("left and right bar sets must be disjoint", "bars")

    def bar_columns(self, width: int, which: str) -> np.ndarray:
        fracs = self.bars_a if which == "a" else self.bars_b
        cols = []
        for f in fracs:
            start = int(round_half_up(f * width - self.bar_width / 2))
            cols.extend(range(max(0, start), min(width, start + self.bar_width)))
        cols = np.array(sorted(set(cols)), dtype=np.int64)
        return cols

    def check_disjoint(self, width: int):
        if np.intersect1d(self.bar_columns(width, "a"), self.bar_columns(width, "b")).size:
            raise ConfigurationError(f"left and right bars overlap at width {width}", "bars")

    def band_rows(self, height: int, which: str = "both") -> tuple[int, int]:
        lo = self.colorbar_rows[0] if which != "ramp" else self.ramp_rows[0]
        hi = self.ramp_rows[1] if which != "bars" else self.colorbar_rows[1]
        return int(math.floor(lo * height)), int(math.floor(hi * height))


def grid_positions(extent_m: float, pixels: int, spacing: float) -> np.ndarray:
    """Pixel indices of grid lines at k * spacing along an axis."""
    step = spacing * pixels / extent_m
    if step < 2:
        raise ConfigurationError(f"spacing {spacing} m is {step:.2f} px; need at least 2 px",
                                 "grid_spacing")
    k = np.arange(int(math.floor(pixels / step + 1e-9)) + 1)
    pos = round_half_up(k * step)
    return pos[pos < pixels]


def generate_pattern(screen: ScreenRect, spec: PatternSpec | None = None,
                     eye: str = "left") -> RasterImage:
    """Grid lines, colour bars, grey ramp and this eye's stereo bars."""
    spec = spec or PatternSpec()
    if eye not in ("left", "right"):
        raise ConfigurationError("eye must be 'left' or 'right'", "eye")
    w, h = screen.pixels_w, screen.pixels_h
    spec.check_disjoint(w)
    img = np.zeros((h, w, 3), dtype=np.uint8)
    lw = spec.line_width
    for c in grid_positions(screen.width, w, spec.grid_spacing):
        img[:, c:c + lw] = WHITE
    for r in grid_positions(screen.height, h, spec.grid_spacing):
        img[r:r + lw, :] = WHITE

    r0, r1 = spec.band_rows(h, "bars")
    edges = round_half_up(np.arange(len(COLORBARS) + 1) * w / len(COLORBARS))
    for i, rgb in enumerate(COLORBARS):
        img[r0:r1, edges[i]:edges[i + 1]] = rgb
    r0, r1 = spec.band_rows(h, "ramp")
    ramp = round_half_up(255 * np.arange(w) / (w - 1)).astype(np.uint8)
    img[r0:r1, :, :] = ramp[None, :, None]

    # keep-out: neither eye shows anything in any bar column except its own bars
    img[:, spec.bar_columns(w, "a")] = 0
    img[:, spec.bar_columns(w, "b")] = 0
    img[:, spec.bar_columns(w, "a" if eye == "left" else "b")] = BAR_GREEN
    return RasterImage(img)


# -- projector and glasses model ----------------------------------------------------

def pixel_affine(screen: ScreenRect, affine) -> np.ndarray:
    """Projector affine (on metres) expressed in continuous pixel coordinates."""
    a = np.asarray(affine, dtype=float)
    s = np.diag([screen.pixels_w / screen.width, screen.pixels_h / screen.height])
    lin = s @ a[:, :2] @ np.linalg.inv(s)
    return np.column_stack([lin, s @ a[:, 2]])


def resample_affine(img: RasterImage, pix_affine) -> RasterImage:
    """Nearest-neighbour image of ``img`` displaced by a pixel-space affine."""
    a = np.asarray(pix_affine, dtype=float)
    lin_inv = np.linalg.inv(a[:, :2])
    h, w = img.height, img.width
    ys, xs = np.mgrid[0:h, 0:w]
    centres = np.stack([xs + 0.5, ys + 0.5], axis=-1) - a[:, 2]
    src = centres @ lin_inv.T
    sx = np.floor(src[..., 0] + 1e-9).astype(np.int64)
    sy = np.floor(src[..., 1] + 1e-9).astype(np.int64)
    ok = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = np.zeros_like(img.pixels)
    out[ok] = img.pixels[sy[ok], sx[ok]]
    return RasterImage(out)


def apply_gain(img: RasterImage, gain) -> RasterImage:
    g = np.asarray(gain, dtype=float)
    if np.all(g == 1.0):
        return RasterImage(img.pixels.copy())
    v = np.minimum(255, round_half_up(img.pixels * g))
    return RasterImage(v.astype(np.uint8))


def simulate_capture(left: RasterImage, right: RasterImage, faults: ScreenFaults | None = None,
                     screen: ScreenRect | None = None) -> tuple[RasterImage, RasterImage]:
    """What each eye sees through the glasses on one screen.

    Order: projector affine, colour gain, genlock break, ghost leak.
    ``screen`` is needed only for a non-identity projector affine.
    """
    if left.pixels.shape != right.pixels.shape:
        raise ValueError("left and right images differ in size")
    sf = faults or ScreenFaults()
    l_img, r_img = left, right
    if not sf.affine_is_identity:
        if screen is None:
            raise ValueError("screen geometry needed to apply a projector affine")
        pa = pixel_affine(screen, sf.projector_affine)
        l_img, r_img = resample_affine(l_img, pa), resample_affine(r_img, pa)
    l_img, r_img = apply_gain(l_img, sf.color_gain), apply_gain(r_img, sf.color_gain)
    lp, rp = l_img.pixels.copy(), r_img.pixels.copy()
    k = sf.genlock_break_row
    if k is not None:
        lp[k:], rp[k:] = r_img.pixels[k:], l_img.pixels[k:]
    g = sf.ghost_leak
    if g > 0:
        lf, rf = lp.astype(float), rp.astype(float)
        lp = round_half_up((1 - g) * lf + g * rf).astype(np.uint8)
        rp = round_half_up((1 - g) * rf + g * lf).astype(np.uint8)
    return RasterImage(lp), RasterImage(rp)


# -- analysis --------------------------------------------------------------------

def _bar_means(img: RasterImage, spec: PatternSpec):
    g = img.pixels[:, :, 1].astype(float)
    ca, cb = spec.bar_columns(img.width, "a"), spec.bar_columns(img.width, "b")
    return g[:, ca].mean(axis=1), g[:, cb].mean(axis=1)


def _row_states(img: RasterImage, spec: PatternSpec, own: str):
    """Per row: +1 where the own eye's bars dominate, -1 for the other eye's, 0 unknown."""
    a, b = _bar_means(img, spec)
    own_m, other_m = (a, b) if own == "a" else (b, a)
    return np.sign(own_m - other_m).astype(int)


def _transitions(states):
    known = np.flatnonzero(states != 0)
    rows = []
    for i, j in zip(known[:-1], known[1:]):
        if states[i] != states[j]:
            rows.append(int(j))
    return rows


def detect_genlock_break(seen_left: RasterImage, seen_right: RasterImage,
                         spec: PatternSpec | None = None):
    """Row where each eye starts seeing the other eye's field, or None.

    A fully exchanged frame has no transition and is reported by
    :func:`stereo_swapped` instead.
    """
    spec = spec or PatternSpec()
    candidates = set()
    for img, own in ((seen_left, "a"), (seen_right, "b")):
        st = _row_states(img, spec, own)
        rows = _transitions(st)
        if len(rows) > 1:
            raise AmbiguousBreakError(rows)
        candidates.update(rows)
    if len(candidates) > 1:
        raise AmbiguousBreakError(sorted(candidates))
    return candidates.pop() if candidates else None


def stereo_swapped(seen_left: RasterImage, seen_right: RasterImage,
                   spec: PatternSpec | None = None) -> bool:
    """True when every row of both eyes shows the other eye's bars."""
    spec = spec or PatternSpec()
    sl = _row_states(seen_left, spec, "a")
    sr = _row_states(seen_right, spec, "b")
    return bool(np.all(sl[sl != 0] < 0) and np.all(sr[sr != 0] < 0) and np.any(sl) and np.any(sr))


def estimate_ghosting(seen_left: RasterImage, seen_right: RasterImage,
                      spec: PatternSpec | None = None) -> float:
    """Leak fraction from bar intensities: wrong / (wrong + correct).

    Per row the brighter bar set is taken as the correct one, so a genlock
    break does not bias the estimate.
    """
    spec = spec or PatternSpec()
    ratios = []
    for img in (seen_left, seen_right):
        a, b = _bar_means(img, spec)
        correct, wrong = np.maximum(a, b), np.minimum(a, b)
        tot = correct.sum() + wrong.sum()
        if tot > 0:
            ratios.append(wrong.sum() / tot)
    return float(np.mean(ratios)) if ratios else 0.0


def compare_color(seen_a: RasterImage, seen_b: RasterImage, spec: PatternSpec | None = None,
                  tolerance: float = 0.05):
    """Per-channel gain of screen B relative to screen A over the colour band.

    Pixels that are black or saturated on A, or saturated on B, are left out.
    Returns (ratios, flagged) where flagged means some ratio lies outside
    [1 - tolerance, 1 + tolerance].
    """
    spec = spec or PatternSpec()
    if seen_a.pixels.shape != seen_b.pixels.shape:
        raise ValueError("images differ in size")
    r0, r1 = spec.band_rows(seen_a.height)
    cols = np.setdiff1d(np.arange(seen_a.width),
                        np.concatenate([spec.bar_columns(seen_a.width, "a"),
                                        spec.bar_columns(seen_a.width, "b")]))
    a = seen_a.pixels[r0:r1][:, cols].reshape(-1, 3).astype(float)
    b = seen_b.pixels[r0:r1][:, cols].reshape(-1, 3).astype(float)
    ratios = []
    for ch in range(3):
        keep = (a[:, ch] > 0) & (a[:, ch] < 255) & (b[:, ch] < 255)
        ratios.append(float(b[keep, ch].sum() / a[keep, ch].sum()) if np.any(keep) else math.nan)
    flagged = any(not (1 - tolerance <= r <= 1 + tolerance) for r in ratios if not math.isnan(r))
    return tuple(ratios), flagged


def _runs(mask_1d):
    """(start, stop) of consecutive True runs."""
    m = np.concatenate([[False], mask_1d, [False]]).astype(np.int8)
    d = np.diff(m)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def check_grid_linearity(seen: RasterImage, spec: PatternSpec | None = None,
                         screen: ScreenRect | None = None):
    """Locate grid lines in a capture and fit the displacing affine.

    Returns (max deviation in px of line centroids from the fitted model,
    fitted 2x3 pixel-space affine).  Lines are matched to the nearest ideal
    line, so displacements beyond half a grid step are not resolved.
    """
    spec = spec or PatternSpec()
    w, h = seen.width, seen.height
    sw = screen.width if screen is not None else 3.0
    sh = screen.height if screen is not None else 3.0
    lw = spec.line_width
    ideal_x = grid_positions(sw, w, spec.grid_spacing) + lw / 2
    ideal_y = grid_positions(sh, h, spec.grid_spacing) + lw / 2
    white = np.all(seen.pixels >= 250, axis=2)
    r0, r1 = spec.band_rows(h)
    bars = np.concatenate([spec.bar_columns(w, "a"), spec.bar_columns(w, "b")])
    usable_rows = np.ones(h, bool)
    margin = max(2, int(0.02 * h))   # the band itself may be displaced
    usable_rows[max(0, r0 - margin):min(h, r1 + margin)] = False
    usable_cols = np.ones(w, bool)
    for c in bars:
        usable_cols[max(0, c - 1):min(w, c + 2)] = False

    row_full = white.mean(axis=1) > 0.5
    col_full = white.mean(axis=0) > 0.5
    obs_x, obs_y = [], []   # (x, y, ideal) samples of vertical / horizontal lines
    for r in np.flatnonzero(usable_rows & ~row_full):
        for a, b in _runs(white[r]):
            if b - a > 3 * lw + 2 or not usable_cols[a:b].all():
                continue
            x = 0.5 * (a + b)
            obs_x.append((x, r + 0.5, ideal_x[np.argmin(np.abs(ideal_x - x))]))
    for c in np.flatnonzero(usable_cols & ~col_full):
        col = white[:, c].copy()
        col[~usable_rows] = False
        for a, b in _runs(col):
            if b - a > 3 * lw + 2:
                continue
            y = 0.5 * (a + b)
            obs_y.append((c + 0.5, y, ideal_y[np.argmin(np.abs(ideal_y - y))]))
    if len(obs_x) < 3 or len(obs_y) < 3:
        raise ValueError("too few grid lines visible to fit an affine")
    ox, oy = np.array(obs_x), np.array(obs_y)
    # inverse map (display -> content): rows solved independently, one
    # rejection pass for stray white pixels that are not grid lines
    fits = []
    for o in (ox, oy):
        m = np.column_stack([o[:, 0], o[:, 1], np.ones(len(o))])
        coef = np.linalg.lstsq(m, o[:, 2], rcond=None)[0]
        keep = np.abs(m @ coef - o[:, 2]) < 3.0
        if 3 <= keep.sum() < len(o):
            coef = np.linalg.lstsq(m[keep], o[keep, 2], rcond=None)[0]
        fits.append((coef, float(np.max(np.abs(m[keep] @ coef - o[keep, 2])))))
    (inv0, dx), (inv1, dy) = fits
    dev = max(dx, dy)
    inv = np.vstack([inv0, inv1])
    lin = np.linalg.inv(inv[:, :2])
    fitted = np.column_stack([lin, -lin @ inv[:, 2]])
    return float(dev), fitted


# -- PPM ---------------------------------------------------------------------

def write_ppm(img: RasterImage) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(img.pixels[::-1]).tobytes()


_PPM_HEADER = re.compile(rb"P6(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)"
                         rb"(?:\s|#[^\n]*\n)+(\d+)\s")


def read_ppm(data: bytes) -> RasterImage:
    m = _PPM_HEADER.match(data)
    if m is None:
        raise ConfigurationError("not a binary P6 PPM", "ppm")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ConfigurationError("only maxval 255 is supported", "ppm")
    body = data[m.end():]
    if len(body) != w * h * 3:
        raise ConfigurationError(f"expected {w * h * 3} pixel bytes, got {len(body)}", "ppm")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)[::-1].copy()
    return RasterImage(pix)
