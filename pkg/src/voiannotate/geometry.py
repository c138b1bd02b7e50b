"""Declarative 3D scene model shared by the renderer and the geometric annotator.

World frame is right-handed with z up; all lengths are meters. The camera
frame has x pointing to +pixel-x (right), y to +pixel-y (down) and z forward,
so a pose quaternion rotates camera coordinates into world coordinates.

A scene is a list of volumes of interest (VOIs, boxes or capped cylinders)
plus background primitives split into two reserved classes: "object-no-voi"
(part of the studied object that belongs to no VOI) and "environment"
(everything else).  Class indices are dense: VOIs take 0..K-1 in file order,
the two defaults take K and K+1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-9
HIT_EPS = 1e-6

# Reserved class names, always the last two entries of a scene's catalog.
DEFAULT_CLASS_NAME = "object-no-voi"
ENVIRONMENT_CLASS_NAME = "environment"


class VoiError(Exception):
    """Base class for domain errors raised by this package."""


class SceneParseError(VoiError):
    def __init__(self, message, line_no=None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# vectors and quaternions


def vec3(x, y, z) -> np.ndarray:
    return np.array([x, y, z], dtype=np.float64)


def norm(v) -> float:
    return float(np.linalg.norm(v))


def normalize(v) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise VoiError("cannot normalize a zero vector")
    return np.asarray(v, dtype=np.float64) / n


def quat(w, x, y, z) -> np.ndarray:
    return np.array([w, x, y, z], dtype=np.float64)


def quat_identity() -> np.ndarray:
    return quat(1.0, 0.0, 0.0, 0.0)


def quat_normalize(q) -> np.ndarray:
    return normalize(np.asarray(q, dtype=np.float64))


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix mapping local coordinates to world coordinates."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(m) -> np.ndarray:
    """Quaternion for an orthonormal rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    return quat_normalize(quat(w, x, y, z))


def quat_from_axis_angle(axis, angle_rad) -> np.ndarray:
    axis = normalize(axis)
    h = 0.5 * angle_rad
    s = math.sin(h)
    return quat(math.cos(h), axis[0] * s, axis[1] * s, axis[2] * s)


def quat_rotate(q, v) -> np.ndarray:
    return quat_to_matrix(q) @ np.asarray(v, dtype=np.float64)


def quat_slerp(q0, q1, u) -> np.ndarray:
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    d = float(np.dot(q0, q1))
    if d < 0.0:  # take the short arc
        q1 = -q1
        d = -d
    if d > 1.0 - 1e-12:
        return quat_normalize(q0 + u * (q1 - q0))
    theta = math.acos(min(1.0, d))
    s = math.sin(theta)
    return quat_normalize(
        (math.sin((1.0 - u) * theta) / s) * q0 + (math.sin(u * theta) / s) * q1
    )


# ---------------------------------------------------------------------------
# core data types


@dataclass(frozen=True)
class Pose:
    """Rigid placement: position in world coordinates plus an orientation
    quaternion (w, x, y, z) rotating local coordinates into world."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        q = np.asarray(self.orientation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise VoiError("pose orientation quaternion is not unit length")
        object.__setattr__(self, "orientation", q / np.linalg.norm(q))

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)


@dataclass(frozen=True)
class CameraIntrinsics:
    width_px: int = 1280
    height_px: int = 960
    focal_px: float = 1000.0
    cx: float = None
    cy: float = None

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0 or self.focal_px <= 0:
            raise VoiError("camera intrinsics must be positive")
        if self.cx is None:
            object.__setattr__(self, "cx", self.width_px / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height_px / 2.0)
        if not (0 <= self.cx < self.width_px and 0 <= self.cy < self.height_px):
            raise VoiError("principal point outside image bounds")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit


@dataclass(frozen=True)
class Material:
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.7]))
    checker_scale: float | None = None
    checker_color: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.albedo, dtype=np.float64)
        if a.shape != (3,) or np.any(a < 0) or np.any(a > 1):
            raise VoiError("albedo channels must be in [0,1]")
        object.__setattr__(self, "albedo", a)
        if self.checker_color is not None:
            c = np.asarray(self.checker_color, dtype=np.float64)
            if np.any(c < 0) or np.any(c > 1):
                raise VoiError("checker color channels must be in [0,1]")
            object.__setattr__(self, "checker_color", c)

    def albedo_at(self, points: np.ndarray) -> np.ndarray:
        """Albedo for an (N,3) array of surface points."""
        points = np.atleast_2d(points)
        out = np.broadcast_to(self.albedo, points.shape).copy()
        if self.checker_scale:
            parity = np.floor(points / self.checker_scale).sum(axis=1).astype(np.int64) % 2
            out[parity == 1] = self.checker_color
        return out


class Box:
    """Oriented box given by center, half extents and a unit quaternion."""

    kind = "box"

    def __init__(self, center, half_extents, orientation=None):
        self.center = np.asarray(center, dtype=np.float64)
        self.half_extents = np.asarray(half_extents, dtype=np.float64)
        if np.any(self.half_extents <= 0):
            raise VoiError("box half extents must be positive")
        self.orientation = quat_normalize(orientation if orientation is not None else quat_identity())
        self._rot = quat_to_matrix(self.orientation)  # local -> world

    def intersect(self, origins, dirs):
        """Slab test for (N,3) ray bundles.

        Returns (t, normal) where t is +inf on miss and normal is the outward
        world-space normal at the hit point.
        """
        lo = (origins - self.center) @ self._rot  # world->local via R^T
        ld = dirs @ self._rot
        h = self.half_extents
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            t1 = (-h - lo) * inv
            t2 = (h - lo) * inv
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        degenerate = np.abs(ld) < 1e-300
        if degenerate.any():
            inside_axis = np.abs(lo) <= h
            near = np.where(degenerate, np.where(inside_axis, -np.inf, np.inf), near)
            far = np.where(degenerate, np.where(inside_axis, np.inf, -np.inf), far)
        tmin = near.max(axis=1)
        tmax = far.min(axis=1)
        t = np.where(tmin > HIT_EPS, tmin, tmax)
        t = np.where((tmin <= tmax) & (t > HIT_EPS), t, np.inf)

        hit = np.isfinite(t)
        normals = np.zeros_like(origins)
        if hit.any():
            lp = lo[hit] + t[hit, None] * ld[hit]
            axis = np.argmax(np.abs(lp) / h, axis=1)
            sign = np.sign(lp[np.arange(lp.shape[0]), axis])
            sign[sign == 0] = 1.0
            local_n = np.zeros_like(lp)
            local_n[np.arange(lp.shape[0]), axis] = sign
            normals[hit] = local_n @ self._rot.T
        return t, normals

    def contains(self, points):
        lp = (np.atleast_2d(points) - self.center) @ self._rot
        return np.all(np.abs(lp) <= self.half_extents + 1e-12, axis=1)

    def corners(self):
        h = self.half_extents
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return self.center + (signs * h) @ self._rot.T

    def surface_grid(self, step, serpentine=True):
        """Serpentine point grid over all six faces.

        Yields (point, outward normal) pairs; rows alternate direction when
        serpentine is set, faces are visited in a fixed +x,-x,+y,-y,+z,-z order.
        """
        pts, nrm = [], []
        h = self.half_extents
        for axis in range(3):
            u_axis, v_axis = [a for a in range(3) if a != axis]
            us = _grid_coords(h[u_axis], step)
            vs = _grid_coords(h[v_axis], step)
            for sign in (1.0, -1.0):
                for i, v in enumerate(vs):
                    row = us if (not serpentine or i % 2 == 0) else us[::-1]
                    for u in row:
                        local = np.zeros(3)
                        local[axis] = sign * h[axis]
                        local[u_axis] = u
                        local[v_axis] = v
                        n_local = np.zeros(3)
                        n_local[axis] = sign
                        pts.append(self.center + self._rot @ local)
                        nrm.append(self._rot @ n_local)
        return np.array(pts), np.array(nrm)


class Cylinder:
    """Capped cylinder from base_center extending height along a unit axis."""

    kind = "cyl"

    def __init__(self, base_center, axis, radius, height):
        self.base_center = np.asarray(base_center, dtype=np.float64)
        self.axis = normalize(axis)
        if radius <= 0 or height <= 0:
            raise VoiError("cylinder radius and height must be positive")
        self.radius = float(radius)
        self.height = float(height)

    def intersect(self, origins, dirs):
        rel = origins - self.base_center
        a = self.axis
        mo = rel @ a
        md = dirs @ a
        perp_o = rel - mo[:, None] * a
        perp_d = dirs - md[:, None] * a
        qa = np.einsum("ij,ij->i", perp_d, perp_d)
        qb = 2.0 * np.einsum("ij,ij->i", perp_o, perp_d)
        qc = np.einsum("ij,ij->i", perp_o, perp_o) - self.radius**2

        n = origins.shape[0]
        cand = np.full((n, 4), np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = qb * qb - 4.0 * qa * qc
            ok = (disc >= 0) & (qa > 1e-300)
            sq = np.sqrt(np.where(ok, disc, 0.0))
            for j, sgn in enumerate((-1.0, 1.0)):
                t = np.where(ok, (-qb + sgn * sq) / (2.0 * qa), np.inf)
                m = mo + t * md
                valid = ok & (t > HIT_EPS) & (m >= 0.0) & (m <= self.height)
                cand[:, j] = np.where(valid, t, np.inf)
            # caps at m=0 and m=height
            for j, plane_m in enumerate((0.0, self.height)):
                t = np.where(np.abs(md) > 1e-300, (plane_m - mo) / md, np.inf)
                radial = perp_o + t[:, None] * perp_d
                r2 = np.einsum("ij,ij->i", radial, radial)
                valid = (t > HIT_EPS) & (r2 <= self.radius**2)
                cand[:, 2 + j] = np.where(valid, t, np.inf)

        which = np.argmin(cand, axis=1)
        t = cand[np.arange(n), which]

        normals = np.zeros_like(origins)
        hit = np.isfinite(t)
        if hit.any():
            idx = np.where(hit)[0]
            for i in idx:
                if which[i] < 2:  # lateral surface
                    p = origins[i] + t[i] * dirs[i] - self.base_center
                    radial = p - (p @ a) * a
                    normals[i] = radial / max(np.linalg.norm(radial), 1e-300)
                elif which[i] == 2:
                    normals[i] = -a
                else:
                    normals[i] = a
        return t, normals

    def contains(self, points):
        rel = np.atleast_2d(points) - self.base_center
        m = rel @ self.axis
        radial = rel - m[:, None] * self.axis
        r2 = np.einsum("ij,ij->i", radial, radial)
        return (m >= -1e-12) & (m <= self.height + 1e-12) & (r2 <= (self.radius + 1e-12) ** 2)

    def corners(self):
        # loose bound: cap centers offset by radius in world axes
        c0 = self.base_center
        c1 = self.base_center + self.height * self.axis
        r = self.radius
        offs = np.array([[r, 0, 0], [-r, 0, 0], [0, r, 0], [0, -r, 0], [0, 0, r], [0, 0, -r]])
        return np.concatenate([c0 + offs, c1 + offs])

    def surface_grid(self, step, serpentine=True):
        """Serpentine grid over the lateral surface plus both caps."""
        pts, nrm = [], []
        a = self.axis
        # stable tangent basis around the axis
        ref = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = normalize(np.cross(a, ref))
        v = np.cross(a, u)

        n_ang = max(3, int(math.floor(2.0 * math.pi * self.radius / step)) + 1)
        angles = np.arange(n_ang) * (2.0 * math.pi / n_ang)
        heights = _grid_coords(self.height / 2.0, step) + self.height / 2.0
        for i, hcoord in enumerate(heights):
            row = angles if (not serpentine or i % 2 == 0) else angles[::-1]
            for ang in row:
                radial = math.cos(ang) * u + math.sin(ang) * v
                pts.append(self.base_center + hcoord * a + self.radius * radial)
                nrm.append(radial)
        # caps: square grid clipped to the disc
        coords = _grid_coords(self.radius, step)
        for m, sign in ((0.0, -1.0), (self.height, 1.0)):
            for i, cv in enumerate(coords):
                row = coords if (not serpentine or i % 2 == 0) else coords[::-1]
                for cu in row:
                    if cu * cu + cv * cv <= self.radius**2 + 1e-12:
                        pts.append(self.base_center + m * a + cu * u + cv * v)
                        nrm.append(sign * a)
        return np.array(pts), np.array(nrm)


def _grid_coords(half_extent, step):
    """Symmetric 1-D grid across [-h, +h] at the given step, centered so any
    remainder splits evenly; endpoints are included exactly when the step
    divides the extent."""
    if step <= 0:
        raise VoiError("grid step must be positive")
    n = int(math.floor(2.0 * half_extent / step + 1e-9))
    offset = (2.0 * half_extent - n * step) / 2.0
    return -half_extent + offset + np.arange(n + 1) * step


@dataclass(frozen=True)
class VOI:
    id: str
    class_index: int
    shape: object
    material: Material


@dataclass
class Scene:
    """Immutable after parsing; all query operations are pure."""

    vois: list
    background: list  # (shape, material, class_index) with index K or K+1
    light_dir: np.ndarray = field(default_factory=lambda: normalize([0.3, -0.4, 0.85]))
    light_intensity: float = 1.0
    ambient: float = 0.2

    def __post_init__(self):
        self.light_dir = normalize(self.light_dir)
        if not 0.0 <= self.ambient <= 1.0:
            raise VoiError("ambient must lie in [0,1]")
        self._prims = [(v.shape, v.material, v.class_index) for v in self.vois]
        self._prims += list(self.background)

    @property
    def num_vois(self) -> int:
        return len(self.vois)

    @property
    def num_classes(self) -> int:
        return len(self.vois) + 2

    @property
    def default_class(self) -> int:
        return len(self.vois)

    @property
    def environment_class(self) -> int:
        return len(self.vois) + 1

    def class_names(self) -> list:
        return [v.id for v in self.vois] + [DEFAULT_CLASS_NAME, ENVIRONMENT_CLASS_NAME]

    def primitives(self):
        """(shape, material, class_index) in deterministic priority order:
        VOIs first (file order), then background primitives."""
        return self._prims

    def shapes_for_class(self, class_index):
        return [s for s, _m, c in self._prims if c == class_index]

    def bbox_center(self) -> np.ndarray:
        corners = np.concatenate([s.corners() for s, _m, _c in self._prims])
        return 0.5 * (corners.min(axis=0) + corners.max(axis=0))


@dataclass(frozen=True)
class Hit:
    t: float
    class_index: int
    point: np.ndarray
    normal: np.ndarray
    prim_index: int


# ---------------------------------------------------------------------------
# scene description parsing


def _floats(tokens, count, line_no, what):
    if len(tokens) < count:
        raise SceneParseError(f"expected {count} numbers for {what}, got {len(tokens)}", line_no)
    try:
        return [float(t) for t in tokens[:count]], tokens[count:]
    except ValueError as exc:
        raise SceneParseError(f"bad number in {what}: {exc}", line_no) from None


def _parse_shape(kind, rest, line_no):
    if kind == "box":
        vals, rest = _floats(rest, 6, line_no, "box")
        cx, cy, cz, hx, hy, hz = vals
        if min(hx, hy, hz) <= 0:
            raise SceneParseError("non-positive box dimension", line_no)
        orientation = None
        if rest:
            qvals, rest = _floats(rest, 4, line_no, "box orientation")
            orientation = quat_normalize(qvals)
        return Box(vec3(cx, cy, cz), vec3(hx, hy, hz), orientation), rest
    if kind == "cyl":
        vals, rest = _floats(rest, 8, line_no, "cylinder")
        cx, cy, cz, ax, ay, az, r, h = vals
        if r <= 0 or h <= 0:
            raise SceneParseError("non-positive cylinder dimension", line_no)
        return Cylinder(vec3(cx, cy, cz), vec3(ax, ay, az), r, h), rest
    raise SceneParseError(f"unknown shape kind '{kind}'", line_no)


def parse_scene(text: str) -> Scene:
    """Parse the line-oriented scene description format.

    Directives (one per line, ``#`` starts a comment):

    * ``voi <id> box cx cy cz hx hy hz [qw qx qy qz]``
    * ``voi <id> cyl cx cy cz ax ay az r h``
    * ``bg <default|env> box|cyl ...`` (same shape arguments)
    * ``material <id> r g b [checker scale r2 g2 b2]`` -- attaches to the VOI
      with the same id; ids ``default`` and ``env`` style the background
    * ``light dx dy dz intensity`` -- direction from surfaces toward the light
    * ``ambient a``
    """
    voi_rows = []  # (id, shape, line_no)
    bg_rows = []  # (which, shape)
    materials = {}
    light_dir, light_intensity = None, None
    ambient = None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        word = tokens[0]
        if word == "voi":
            if len(tokens) < 3:
                raise SceneParseError("voi needs an id and a shape", line_no)
            vid = tokens[1]
            if any(vid == existing for existing, _s, _l in voi_rows):
                raise SceneParseError(f"duplicate id '{vid}'", line_no)
            if vid in (DEFAULT_CLASS_NAME, ENVIRONMENT_CLASS_NAME, "default", "env"):
                raise SceneParseError(f"'{vid}' is a reserved class name", line_no)
            shape, rest = _parse_shape(tokens[2], tokens[3:], line_no)
            if rest:
                raise SceneParseError(f"trailing tokens: {' '.join(rest)}", line_no)
            voi_rows.append((vid, shape, line_no))
        elif word == "bg":
            if len(tokens) < 3 or tokens[1] not in ("default", "env"):
                raise SceneParseError("bg needs 'default' or 'env' plus a shape", line_no)
            shape, rest = _parse_shape(tokens[2], tokens[3:], line_no)
            if rest:
                raise SceneParseError(f"trailing tokens: {' '.join(rest)}", line_no)
            bg_rows.append((tokens[1], shape))
        elif word == "material":
            if len(tokens) < 5:
                raise SceneParseError("material needs an id and r g b", line_no)
            mid = tokens[1]
            vals, rest = _floats(tokens[2:], 3, line_no, "material color")
            checker_scale = checker_color = None
            if rest:
                if rest[0] != "checker":
                    raise SceneParseError(f"unexpected token '{rest[0]}'", line_no)
                cvals, rest = _floats(rest[1:], 4, line_no, "checker")
                checker_scale, checker_color = cvals[0], np.array(cvals[1:])
                if checker_scale <= 0:
                    raise SceneParseError("checker scale must be positive", line_no)
            if rest:
                raise SceneParseError(f"trailing tokens: {' '.join(rest)}", line_no)
            try:
                materials[mid] = Material(np.array(vals), checker_scale, checker_color)
            except VoiError as exc:
                raise SceneParseError(str(exc), line_no) from None
        elif word == "light":
            vals, rest = _floats(tokens[1:], 4, line_no, "light")
            if rest:
                raise SceneParseError(f"trailing tokens: {' '.join(rest)}", line_no)
            light_dir = vec3(*vals[:3])
            if np.linalg.norm(light_dir) == 0:
                raise SceneParseError("light direction must be nonzero", line_no)
            light_intensity = vals[3]
        elif word == "ambient":
            vals, _ = _floats(tokens[1:], 1, line_no, "ambient")
            ambient = vals[0]
            if not 0.0 <= ambient <= 1.0:
                raise SceneParseError("ambient must lie in [0,1]", line_no)
        else:
            raise SceneParseError(f"unknown directive '{word}'", line_no)

    gray = Material()
    vois = [
        VOI(vid, idx, shape, materials.get(vid, gray))
        for idx, (vid, shape, _line) in enumerate(voi_rows)
    ]
    k = len(vois)
    background = []
    for which, shape in bg_rows:
        cls = k if which == "default" else k + 1
        background.append((shape, materials.get(which, gray), cls))

    kwargs = {}
    if light_dir is not None:
        kwargs["light_dir"] = light_dir
        kwargs["light_intensity"] = light_intensity
    if ambient is not None:
        kwargs["ambient"] = ambient
    return Scene(vois=vois, background=background, **kwargs)


# ---------------------------------------------------------------------------
# camera model and intersection queries


def project(point, pose: Pose, k: CameraIntrinsics):
    """Pinhole projection of a world point; None when at or behind the camera."""
    rel = np.asarray(point, dtype=np.float64) - pose.position
    cam = pose.rotation().T @ rel
    if cam[2] <= 0.0:
        return None
    return (
        k.cx + k.focal_px * cam[0] / cam[2],
        k.cy + k.focal_px * cam[1] / cam[2],
    )


def ray_for_pixel(pose: Pose, k: CameraIntrinsics, px, py) -> Ray:
    """World ray through a pixel; inverse of :func:`project` up to scale."""
    if not (0 <= px <= k.width_px - 1 and 0 <= py <= k.height_px - 1):
        raise VoiError(f"pixel ({px},{py}) outside image bounds")
    d_cam = np.array([(px - k.cx) / k.focal_px, (py - k.cy) / k.focal_px, 1.0])
    d_world = pose.rotation() @ d_cam
    return Ray(origin=pose.position.copy(), direction=normalize(d_world))


def intersect_rays(scene: Scene, origins, dirs):
    """Nearest-hit query for an (N,3) ray bundle.

    Returns (t, prim_index, class_index, normals); t=+inf and indices -1 on
    miss. Ties on t keep the lower primitive index (VOIs come first).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_prim = np.full(n, -1, dtype=np.int64)
    best_class = np.full(n, -1, dtype=np.int64)
    best_normal = np.zeros((n, 3))
    for prim_index, (shape, _mat, cls) in enumerate(scene.primitives()):
        t, normals = shape.intersect(origins, dirs)
        closer = t < best_t  # strict: ties keep the earlier primitive
        best_t = np.where(closer, t, best_t)
        best_prim = np.where(closer, prim_index, best_prim)
        best_class = np.where(closer, cls, best_class)
        best_normal = np.where(closer[:, None], normals, best_normal)
    return best_t, best_prim, best_class, best_normal


def intersect_ray(scene: Scene, ray: Ray):
    """Nearest hit of a single ray, or None on miss."""
    t, prim, cls, normal = intersect_rays(scene, ray.origin[None, :], ray.direction[None, :])
    if not np.isfinite(t[0]):
        return None
    return Hit(
        t=float(t[0]),
        class_index=int(cls[0]),
        point=ray.origin + float(t[0]) * ray.direction,
        normal=normal[0],
        prim_index=int(prim[0]),
    )


def visual_angle(diameter_m: float, distance_m: float) -> float:
    """Angle in degrees subtended by a disc of the given diameter."""
    if distance_m <= 0:
        raise VoiError("distance must be positive")
    if diameter_m < 0:
        raise VoiError("diameter must be non-negative")
    return math.degrees(2.0 * math.atan(diameter_m / (2.0 * distance_m)))
