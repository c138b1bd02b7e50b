"""Geometric gaze annotation: head pose + gaze pixel -> world ray -> scene hit.

This is the offline reproduction of marker/motion-tracking annotators: a
rigid registration aligns the eye-tracker scene camera to the tracked head
frame, poses are interpolated to each scan point's timestamp, and the gaze
ray's nearest intersection with the scene decides the class. Pose gaps wider
than a coverage window mark the scan point as uncovered instead of
extrapolating.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Pose,
    Ray,
    Scene,
    VoiError,
    intersect_ray,
    normalize,
    quat_slerp,
)

DEFAULT_COVERAGE_WINDOW_MS = 100.0


@dataclass(frozen=True)
class HeadPoseSample:
    t_ms: float
    pose: Pose


@dataclass(frozen=True)
class ScanPoint:
    t_ms: float
    x_px: float
    y_px: float


@dataclass(frozen=True)
class Registration:
    """Rigid transform from the eye-tracker camera frame to the tracked head
    frame (identity when the scene camera itself is the tracked body)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise VoiError("registration rotation must be orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @classmethod
    def from_row_major(cls, numbers):
        vals = [float(v) for v in numbers]
        if len(vals) != 12:
            raise VoiError(f"registration needs 12 numbers (row-major rotation + translation), got {len(vals)}")
        return cls(rotation=np.array(vals[:9]).reshape(3, 3), translation=np.array(vals[9:]))


def parse_poses_csv(text: str):
    """Pose stream rows `t_ms,x,y,z,qw,qx,qy,qz`, sorted by time."""
    lines = text.splitlines()
    if not lines:
        raise VoiError("empty pose document")
    cols = [c.strip() for c in lines[0].split(",")]
    required = ("t_ms", "x", "y", "z", "qw", "qx", "qy", "qz")
    for name in required:
        if name not in cols:
            raise VoiError(f"pose file missing column '{name}'")
    idx = {name: cols.index(name) for name in cols}
    out = []
    last_t = -math.inf
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            t = float(parts[idx["t_ms"]])
            pos = [float(parts[idx[c]]) for c in ("x", "y", "z")]
            q = np.array([float(parts[idx[c]]) for c in ("qw", "qx", "qy", "qz")])
        except (ValueError, IndexError) as exc:
            raise VoiError(f"pose line {line_no}: {exc}") from None
        if t < last_t:
            raise VoiError(f"pose line {line_no}: non-monotone timestamp")
        last_t = t
        out.append(HeadPoseSample(t, Pose(np.array(pos), q / np.linalg.norm(q))))
    return out


def interpolate_pose(poses, t_ms: float, window_ms: float = DEFAULT_COVERAGE_WINDOW_MS):
    """Pose at t via linear position + spherical-linear orientation blending.

    Returns None ("uncovered") outside the sampled range or when the
    bracketing gap exceeds the coverage window.
    """
    if not poses:
        raise VoiError("empty pose list")
    times = [p.t_ms for p in poses]
    i = bisect.bisect_left(times, t_ms)
    if i < len(poses) and poses[i].t_ms == t_ms:
        return poses[i].pose
    if i == 0 or i == len(poses):
        return None
    lo, hi = poses[i - 1], poses[i]
    gap = hi.t_ms - lo.t_ms
    if gap > window_ms:
        return None
    u = (t_ms - lo.t_ms) / gap if gap > 0 else 0.0
    position = (1.0 - u) * lo.pose.position + u * hi.pose.position
    orientation = quat_slerp(lo.pose.orientation, hi.pose.orientation, u)
    return Pose(position, orientation)


def gaze_ray(pose: Pose, reg: Registration, gaze_px, k: CameraIntrinsics) -> Ray:
    """World gaze ray for a scene-camera pixel under a head pose."""
    px, py = gaze_px
    if not (0 <= px <= k.width_px - 1 and 0 <= py <= k.height_px - 1):
        raise VoiError(f"gaze pixel ({px},{py}) outside scene camera bounds")
    d_cam = np.array([(px - k.cx) / k.focal_px, (py - k.cy) / k.focal_px, 1.0])
    head_r = pose.rotation()
    direction = head_r @ (reg.rotation @ d_cam)
    origin = pose.position + head_r @ reg.translation
    return Ray(origin=origin, direction=normalize(direction))


@dataclass(frozen=True)
class ScanPointResult:
    t_ms: float
    covered: bool
    class_index: int | None  # None when uncovered


def annotate_scanpoints(scene: Scene, scanpoints, poses, reg: Registration, k: CameraIntrinsics, window_ms: float = DEFAULT_COVERAGE_WINDOW_MS):
    """Class per scan point: VOI hits keep their class, background hits map to
    the object-no-voi default, misses to environment; points without an
    interpolable pose are flagged uncovered and take no class."""
    results = []
    for sp in scanpoints:
        pose = interpolate_pose(poses, sp.t_ms, window_ms)
        if pose is None:
            results.append(ScanPointResult(sp.t_ms, False, None))
            continue
        ray = gaze_ray(pose, reg, (sp.x_px, sp.y_px), k)
        hit = intersect_ray(scene, ray)
        cls = hit.class_index if hit is not None else scene.environment_class
        results.append(ScanPointResult(sp.t_ms, True, cls))
    return results


def span_covered(poses, start_ms: float, end_ms: float, window_ms: float = DEFAULT_COVERAGE_WINDOW_MS) -> bool:
    """True when every instant of [start, end] is interpolable."""
    if not poses:
        return False
    times = [p.t_ms for p in poses]
    if start_ms < times[0] or end_ms > times[-1]:
        return False
    i = bisect.bisect_right(times, start_ms) - 1
    while i + 1 < len(times) and times[i] < end_ms:
        if times[i + 1] - times[i] > window_ms and not (times[i + 1] <= start_ms or times[i] >= end_ms):
            return False
        i += 1
    return True


def pose_coverage(fixations, poses, window_ms: float = DEFAULT_COVERAGE_WINDOW_MS) -> float:
    """Fraction of fixations whose full time span has interpolable poses."""
    fixations = list(fixations)
    if not fixations:
        raise VoiError("empty fixation list")
    covered = sum(span_covered(poses, f.start_ms, f.end_ms, window_ms) for f in fixations)
    return covered / len(fixations)
