"""Viewer-centred stereo projection onto planar screens.

All lengths are metres.  World frame is right-handed with +y up and the
origin at the centre of the floor.  A screen is described by three corners;
its (u, v) coordinates start at the lower-left corner with u along the
lower edge and v along the left edge.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DegenerateFrustumError, NoImageError

# eye-to-plane distance at or below which the frustum is degenerate
DEGENERATE_DISTANCE = 1e-9

IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


def vec3(x, name="vector") -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise ConfigurationError(f"expected 3 components, got {v.shape[0]}", name)
    if not np.all(np.isfinite(v)):
        raise ConfigurationError("non-finite component", name)
    return v


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalise a zero vector")
    return v / n


# -- quaternions (w, x, y, z) ------------------------------------------------

def quat_from_axis_angle(axis, angle_rad) -> np.ndarray:
    ax = unit(vec3(axis, "axis"))
    s = math.sin(angle_rad / 2.0)
    return np.array([math.cos(angle_rad / 2.0), *(ax * s)])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray = IDENTITY_QUAT

    def __post_init__(self):
        object.__setattr__(self, "position", vec3(self.position, "position"))
        q = np.asarray(self.orientation, dtype=float).reshape(-1)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise ConfigurationError("orientation must be a finite (w, x, y, z) quaternion", "orientation")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ConfigurationError(f"quaternion norm {np.linalg.norm(q)!r} is not 1", "orientation")
        object.__setattr__(self, "orientation", q)

    @cached_property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def to_world(self, local) -> np.ndarray:
        return self.position + self.rotation @ np.asarray(local, dtype=float)

    def __eq__(self, other):
        return (isinstance(other, Pose)
                and np.array_equal(self.position, other.position)
                and np.array_equal(self.orientation, other.orientation))

    __hash__ = None


# -- screens -----------------------------------------------------------------

@dataclass(frozen=True)
class ScreenBasis:
    right: np.ndarray
    up: np.ndarray
    normal: np.ndarray
    width: float
    height: float
    origin: np.ndarray

    def signed_distance(self, p) -> float:
        """Distance of ``p`` from the plane, positive on the interior side."""
        return float(np.dot(np.asarray(p, dtype=float) - self.origin, self.normal))

    def to_uv(self, p) -> tuple[float, float]:
        d = np.asarray(p, dtype=float) - self.origin
        return float(np.dot(d, self.right)), float(np.dot(d, self.up))

    def to_world(self, u, v) -> np.ndarray:
        return self.origin + u * self.right + v * self.up

    def shifted(self, distance: float) -> "ScreenBasis":
        if distance == 0.0:
            return self
        return ScreenBasis(self.right, self.up, self.normal, self.width, self.height,
                           self.origin + distance * self.normal)


@dataclass(frozen=True)
class ScreenRect:
    lower_left: np.ndarray
    lower_right: np.ndarray
    upper_left: np.ndarray
    pixels_w: int = 1024
    pixels_h: int = 1024
    name: str = "screen"

    def __post_init__(self):
        for attr in ("lower_left", "lower_right", "upper_left"):
            object.__setattr__(self, attr, vec3(getattr(self, attr), f"{self.name}.{attr}"))
        for attr in ("pixels_w", "pixels_h"):
            n = getattr(self, attr)
            if int(n) != n or n <= 0:
                raise ConfigurationError("must be a positive integer", f"{self.name}.{attr}")
            object.__setattr__(self, attr, int(n))
        e1 = self.lower_right - self.lower_left
        e2 = self.upper_left - self.lower_left
        n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
        if n1 == 0.0 or n2 == 0.0:
            raise ConfigurationError("degenerate corners (zero-length edge)", self.name)
        if abs(np.dot(e1, e2)) > 1e-9 * n1 * n2:
            raise ConfigurationError("lower and left edges are not perpendicular", self.name)

    @cached_property
    def basis(self) -> ScreenBasis:
        e1 = self.lower_right - self.lower_left
        e2 = self.upper_left - self.lower_left
        right, up = unit(e1), unit(e2)
        return ScreenBasis(right, up, np.cross(right, up), float(np.linalg.norm(e1)),
                           float(np.linalg.norm(e2)), self.lower_left.copy())

    @property
    def width(self) -> float:
        return self.basis.width

    @property
    def height(self) -> float:
        return self.basis.height

    @property
    def center(self) -> np.ndarray:
        return self.basis.to_world(self.width / 2, self.height / 2)

    def __eq__(self, other):
        return (isinstance(other, ScreenRect) and self.name == other.name
                and self.pixels_w == other.pixels_w and self.pixels_h == other.pixels_h
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("lower_left", "lower_right", "upper_left")))

    __hash__ = None


def screen_basis(s: ScreenRect, interior_point=None) -> ScreenBasis:
    """Orthonormal frame of ``s`` with ``right x up = normal``.

    When ``interior_point`` is given the normal must face it; a screen whose
    corner order makes it face away is a configuration error, since flipping
    the normal would either break handedness or mirror the image.
    """
    b = s.basis
    if interior_point is not None:
        d = b.signed_distance(vec3(interior_point, "interior_point"))
        if d <= DEGENERATE_DISTANCE:
            raise ConfigurationError(
                "normal faces away from the interior point; reorder corners so that "
                "(lower_right - lower_left) x (upper_left - lower_left) points inward", s.name)
    return b


@dataclass(frozen=True)
class ScreenPoint:
    u: float
    v: float
    px: float
    py: float

    @classmethod
    def from_uv(cls, u, v, s: ScreenRect) -> "ScreenPoint":
        u, v = float(u), float(v)
        return cls(u, v, u / s.width * s.pixels_w, v / s.height * s.pixels_h)

    @property
    def uv(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True)
class FrustumParams:
    left: float
    right: float
    bottom: float
    top: float
    near: float
    far: float
    eye: np.ndarray
    basis: ScreenBasis

    def horizontal_fov(self) -> float:
        """Full horizontal angle of view in degrees."""
        return math.degrees(math.atan2(self.right, self.near) - math.atan2(self.left, self.near))

    def projection_matrix(self) -> np.ndarray:
        l, r, b, t, n, f = self.left, self.right, self.bottom, self.top, self.near, self.far
        return np.array([
            [2 * n / (r - l), 0, (r + l) / (r - l), 0],
            [0, 2 * n / (t - b), (t + b) / (t - b), 0],
            [0, 0, -(f + n) / (f - n), -2 * f * n / (f - n)],
            [0, 0, -1, 0],
        ])

    def view_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = np.vstack([self.basis.right, self.basis.up, self.basis.normal])
        m[:3, 3] = -m[:3, :3] @ self.eye
        return m

    def matrix(self) -> np.ndarray:
        """Combined clip-from-world matrix, OpenGL conventions."""
        return self.projection_matrix() @ self.view_matrix()


# -- operations ----------------------------------------------------------------

def derive_eyes(head: Pose, ipd: float, glasses_offset=(0.0, 0.0, 0.0)):
    """Left and right eye positions for a tracked head pose.

    Eyes sit at ``glasses_offset -/+ ipd/2`` along the head's x axis, then
    the head pose is applied.
    """
    if not ipd > 0:
        raise ConfigurationError("ipd must be positive", "ipd")
    off = np.asarray(glasses_offset, dtype=float)
    half = np.array([ipd / 2.0, 0.0, 0.0])
    return head.to_world(off - half), head.to_world(off + half)


def _eye_distance(eye, b: ScreenBasis) -> float:
    a = b.signed_distance(eye)
    if a <= DEGENERATE_DISTANCE:
        raise DegenerateFrustumError(f"eye is {a:.3e} m from the projection plane")
    return a


def project_uv(eye, b: ScreenBasis, p) -> tuple[float, float]:
    eye = np.asarray(eye, dtype=float)
    a = _eye_distance(eye, b)
    d = np.asarray(p, dtype=float) - eye
    dn = float(np.dot(d, b.normal))
    if dn >= 0.0:
        raise NoImageError("point is not beyond the eye plane")
    x = eye + (a / -dn) * d
    return b.to_uv(x)


def project_point(eye, s: ScreenRect, p) -> ScreenPoint:
    """Image of ``p`` on the plane of ``s`` along the ray from ``eye``.

    The result may fall outside the rectangle.  Raises
    DegenerateFrustumError when the eye is not on the interior side and
    NoImageError when ``p`` is not farther from the screen than the eye.
    """
    u, v = project_uv(eye, s.basis, p)
    return ScreenPoint.from_uv(u, v, s)


def project_many(eye, b: ScreenBasis, pts):
    """Vectorised projection.  Returns (uv array (n, 2), valid mask)."""
    eye = np.asarray(eye, dtype=float)
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    a = b.signed_distance(eye)
    d = pts - eye
    dn = d @ b.normal
    valid = dn < 0.0
    if a <= DEGENERATE_DISTANCE:
        valid[:] = False
    t = np.where(valid, a / np.where(valid, -dn, 1.0), 0.0)
    x = eye + t[:, None] * d - b.origin
    return np.column_stack([x @ b.right, x @ b.up]), valid


def offaxis_frustum(eye, s: ScreenRect, near: float, far: float) -> FrustumParams:
    """Asymmetric frustum whose cross-section at the screen is the screen."""
    if not 0 < near < far:
        raise ConfigurationError("need 0 < near < far")
    eye = vec3(eye, "eye")
    b = s.basis
    a = _eye_distance(eye, b)
    va = s.lower_left - eye
    vb = s.lower_right - eye
    vc = s.upper_left - eye
    k = near / a
    return FrustumParams(float(np.dot(b.right, va) * k), float(np.dot(b.right, vb) * k),
                         float(np.dot(b.up, va) * k), float(np.dot(b.up, vc) * k),
                         near, far, eye, b)


def depth_behind(s: ScreenRect, p) -> float:
    """Signed distance of ``p`` behind the screen plane (negative in front)."""
    return -s.basis.signed_distance(p)


def disparity(eye_l, eye_r, s: ScreenRect, p) -> tuple[float, float]:
    """Left image minus right image, in screen metres."""
    ul, vl = project_uv(eye_l, s.basis, p)
    ur, vr = project_uv(eye_r, s.basis, p)
    return ul - ur, vl - vr


def parallax_shift(eye, delta, s: ScreenRect, p) -> tuple[float, float]:
    delta = vec3(delta, "delta")
    if abs(np.dot(delta, s.basis.normal)) > 1e-9 * max(1.0, np.linalg.norm(delta)):
        raise ValueError("head displacement must be parallel to the screen")
    u0, v0 = project_uv(eye, s.basis, p)
    u1, v1 = project_uv(np.asarray(eye, dtype=float) + delta, s.basis, p)
    return u1 - u0, v1 - v0


def projected_extent(eye, s: ScreenRect, p_center, world_width: float) -> float:
    """On-screen length of a segment of ``world_width`` centred at
    ``p_center`` and parallel to the screen's lower edge."""
    half = 0.5 * world_width * s.basis.right
    c = np.asarray(p_center, dtype=float)
    u0, v0 = project_uv(eye, s.basis, c - half)
    u1, v1 = project_uv(eye, s.basis, c + half)
    return math.hypot(u1 - u0, v1 - v0)


def facing_orientation(b: ScreenBasis) -> np.ndarray:
    """Head orientation looking straight at a screen, eyes level with its u axis."""
    return quat_from_matrix(np.column_stack([b.right, b.up, b.normal]))


def ray_plane_intersection(origin, direction, plane_point, plane_normal):
    """Brute-force line/plane intersection; ``None`` when parallel."""
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    denom = float(np.dot(direction, plane_normal))
    if abs(denom) < 1e-15:
        return None
    t = float(np.dot(np.asarray(plane_point) - origin, plane_normal)) / denom
    return origin + t * direction, t
