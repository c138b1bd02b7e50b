"""Software ray-cast renderer and labeled synthetic dataset generator.

A fixation marker is swept across every surface of every class (VOIs plus the
two default classes) while a sampling plan moves the camera around the scene;
each visible sweep point yields one marker-overlaid, thumbnail-cropped frame
plus a manifest row carrying the exact camera pose and marker geometry.
"""

from __future__ import annotations

import logging
import math
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Pose,
    Scene,
    VoiError,
    intersect_ray,
    intersect_rays,
    normalize,
    project,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_mul,
    ray_for_pixel,
    vec3,
)
from .images import Image, crop, place_crop_window

log = logging.getLogger(__name__)

# Flat color for rays that leave the scene.
BACKGROUND_RGB = np.array([0.30, 0.42, 0.55])

MANIFEST_MAGIC = "#voi-manifest v1"


@dataclass(frozen=True)
class MarkerStyle:
    radius_px: int = 8
    fill_rgb: tuple = (230, 60, 30)
    ring_rgb: tuple = (255, 255, 255)
    ring_px: int = 2

    def __post_init__(self):
        if self.radius_px < 2:
            raise VoiError("marker radius must be at least 2 px")
        if self.ring_px < 0:
            raise VoiError("ring width must be non-negative")


@dataclass(frozen=True)
class CameraSamplingPlan:
    """Where the virtual scene camera goes.

    Azimuth sweeps around the scene's vertical axis at a fixed distance;
    heights mix anthropometric eye levels (the shipped defaults are
    placeholder percentile eye heights in meters -- configure them for the
    population under study) with per-feature extra heights such as a display
    height and 0.30 m above/below it.
    """

    azimuth_start_deg: float = -45.0
    azimuth_stop_deg: float = 45.0
    azimuth_step_deg: float = 15.0
    eye_heights_m: tuple = (1.535, 1.635, 1.755)
    extra_heights_m: tuple = ()
    distance_m: float = 1.0
    roll_deg: tuple = (0.0,)
    aim_jitter_deg: float = 5.0
    jitter_seed: int | None = None
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)

    def __post_init__(self):
        if not (-180.0 <= self.azimuth_start_deg <= 180.0 and -180.0 <= self.azimuth_stop_deg <= 180.0):
            raise VoiError("azimuth range must lie within [-180, 180] degrees")
        if self.azimuth_step_deg <= 0:
            raise VoiError("azimuth step must be positive")
        if self.distance_m <= 0:
            raise VoiError("camera distance must be positive")
        heights = tuple(self.eye_heights_m) + tuple(self.extra_heights_m)
        if not heights or any(h <= 0 for h in heights):
            raise VoiError("camera heights must be positive")

    def azimuths(self):
        n = int(math.floor((self.azimuth_stop_deg - self.azimuth_start_deg) / self.azimuth_step_deg + 1e-9))
        if n < 0:
            raise VoiError("empty azimuth set")
        return [self.azimuth_start_deg + i * self.azimuth_step_deg for i in range(n + 1)]

    def heights(self):
        seen, out = set(), []
        for h in tuple(self.eye_heights_m) + tuple(self.extra_heights_m):
            if h not in seen:
                seen.add(h)
                out.append(h)
        return out


@dataclass(frozen=True)
class MarkerPathConfig:
    step_m: float = 0.05
    serpentine: bool = True
    bg_step_m: float | None = None  # coarser sweep for large background surfaces

    def __post_init__(self):
        if self.step_m <= 0 or (self.bg_step_m is not None and self.bg_step_m <= 0):
            raise VoiError("marker path step must be positive")


@dataclass(frozen=True)
class ManifestRow:
    path: str
    class_index: int
    px: int
    py: int
    cam_q: tuple  # (w, x, y, z)
    cam_pos: tuple
    marker: tuple  # 3D sweep point


@dataclass
class DatasetManifest:
    classes: int
    seed: int
    rows: list
    underrepresented: tuple = ()
    extra: dict = field(default_factory=dict)

    def header_line(self) -> str:
        parts = [MANIFEST_MAGIC, f"classes={self.classes}", f"seed={self.seed}"]
        if self.underrepresented:
            parts.append("underrepresented=" + ",".join(str(c) for c in self.underrepresented))
        for key, value in self.extra.items():
            parts.append(f"{key}={value}")
        return " ".join(parts)

    def write(self, path):
        path = Path(path)
        base = path.parent
        for row in self.rows:
            if not (0 <= row.class_index < self.classes):
                raise VoiError(f"row class {row.class_index} outside catalog of {self.classes}")
            if not (base / row.path).exists():
                raise VoiError(f"manifest references missing file {row.path}")
        lines = [self.header_line()]
        for r in self.rows:
            nums = [r.px, r.py, *r.cam_q, *r.cam_pos, *r.marker]
            lines.append(",".join([r.path, str(r.class_index)] + [_fmt(v) for v in nums]))
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path):
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or not lines[0].startswith(MANIFEST_MAGIC):
            raise VoiError(f"{path}: not a dataset manifest")
        fields = lines[0][len(MANIFEST_MAGIC):].split()
        meta = dict(f.split("=", 1) for f in fields)
        under = tuple(int(c) for c in meta.pop("underrepresented", "").split(",") if c)
        classes = int(meta.pop("classes"))
        seed = int(meta.pop("seed"))
        rows = []
        for line_no, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 14:
                raise VoiError(f"{path} line {line_no}: expected 14 fields, got {len(parts)}")
            rows.append(
                ManifestRow(
                    path=parts[0],
                    class_index=int(parts[1]),
                    px=int(round(float(parts[2]))),
                    py=int(round(float(parts[3]))),
                    cam_q=tuple(float(v) for v in parts[4:8]),
                    cam_pos=tuple(float(v) for v in parts[8:11]),
                    marker=tuple(float(v) for v in parts[11:14]),
                )
            )
        return cls(classes=classes, seed=seed, rows=rows, underrepresented=under, extra=meta)

    def class_counts(self):
        counts = {}
        for r in self.rows:
            counts[r.class_index] = counts.get(r.class_index, 0) + 1
        return counts


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------------------
# rendering


def render_region(scene: Scene, pose: Pose, k: CameraIntrinsics, x0, y0, w, h) -> Image:
    """Ray-cast a pixel window [x0, x0+w) x [y0, y0+h) of the full frame.

    Shading is Lambertian with hard shadows:
    albedo * (ambient + (1-ambient) * intensity * max(0, n.l) * lit).
    """
    xs = (np.arange(x0, x0 + w, dtype=np.float64) - k.cx) / k.focal_px
    ys = (np.arange(y0, y0 + h, dtype=np.float64) - k.cy) / k.focal_px
    gx, gy = np.meshgrid(xs, ys)
    dirs_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation().T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()

    t, prim, _cls, normal = intersect_rays(scene, origins, dirs)
    out = np.broadcast_to(BACKGROUND_RGB, (w * h, 3)).copy()
    hit = np.isfinite(t)
    if hit.any():
        points = origins[hit] + t[hit, None] * dirs[hit]
        nrm = normal[hit]
        lambert = np.maximum(0.0, nrm @ scene.light_dir)
        lit = np.zeros(points.shape[0])
        needs_shadow = lambert > 0.0
        if needs_shadow.any():
            sp = points[needs_shadow]
            sd = np.broadcast_to(scene.light_dir, sp.shape).copy()
            occ_t, _p, _c, _n = intersect_rays(scene, sp, sd)
            lit[needs_shadow] = (~np.isfinite(occ_t)).astype(np.float64)
        albedo = np.empty_like(points)
        prim_hit = prim[hit]
        for idx, (shape, mat, _c) in enumerate(scene.primitives()):
            mask = prim_hit == idx
            if mask.any():
                albedo[mask] = mat.albedo_at(points[mask])
        shade = scene.ambient + (1.0 - scene.ambient) * scene.light_intensity * lambert * lit
        out[hit] = albedo * shade[:, None]
    return Image.from_float(out.reshape(h, w, 3))


def render_frame(scene: Scene, pose: Pose, k: CameraIntrinsics) -> Image:
    """Full-frame render; deterministic for identical inputs."""
    bands = []
    band_h = max(1, min(k.height_px, 2_000_000 // max(1, k.width_px * 16)))
    for y0 in range(0, k.height_px, band_h):
        h = min(band_h, k.height_px - y0)
        bands.append(render_region(scene, pose, k, 0, y0, k.width_px, h).pixels)
    return Image(np.concatenate(bands, axis=0))


def overlay_marker(image: Image, px: int, py: int, style: MarkerStyle) -> Image:
    """Composite a filled disc plus ring at (px, py); clipped at borders."""
    if not (0 <= px < image.width and 0 <= py < image.height):
        raise VoiError(f"marker center ({px},{py}) outside image")
    out = image.pixels.copy()
    reach = style.radius_px + style.ring_px
    x_lo, x_hi = max(0, px - reach), min(image.width - 1, px + reach)
    y_lo, y_hi = max(0, py - reach), min(image.height - 1, py + reach)
    ys, xs = np.mgrid[y_lo : y_hi + 1, x_lo : x_hi + 1]
    d = np.sqrt((xs - px) ** 2 + (ys - py) ** 2)
    patch = out[y_lo : y_hi + 1, x_lo : x_hi + 1]
    patch[d <= style.radius_px] = style.fill_rgb
    ring = (d > style.radius_px) & (d < reach)  # strict: d == reach stays put
    patch[ring] = style.ring_rgb
    return Image(out)


# ---------------------------------------------------------------------------
# camera sampling and marker sweeps


def look_at_pose(position, target, roll_deg=0.0) -> Pose:
    """Camera pose at `position` facing `target`, world z treated as up."""
    position = np.asarray(position, dtype=np.float64)
    forward = normalize(np.asarray(target, dtype=np.float64) - position)
    up = vec3(0.0, 0.0, 1.0)
    if abs(float(forward @ up)) > 1.0 - 1e-9:
        up = vec3(0.0, 1.0, 0.0)
    right = normalize(np.cross(forward, up))
    down = np.cross(forward, right)
    q = quat_from_matrix(np.column_stack([right, down, forward]))
    if roll_deg:
        q = quat_mul(q, quat_from_axis_angle(vec3(0, 0, 1), math.radians(roll_deg)))
    return Pose(position, q)


def sample_cameras(plan: CameraSamplingPlan, scene: Scene, seed: int = 0):
    """Cartesian product of azimuths x heights x rolls at a fixed distance,
    aimed at the scene bounding-box center with deterministic aim jitter."""
    aim = scene.bbox_center()
    rng = np.random.default_rng(plan.jitter_seed if plan.jitter_seed is not None else seed)
    jit = math.radians(plan.aim_jitter_deg)
    views = []
    for az in plan.azimuths():
        for height in plan.heights():
            for roll in plan.roll_deg:
                dz = height - aim[2]
                horiz = math.sqrt(max(0.0, plan.distance_m**2 - dz * dz))
                if abs(dz) > plan.distance_m:
                    dz = math.copysign(plan.distance_m, dz)
                    log.warning("camera height %.3f unreachable at distance %.3f; placing overhead", height, plan.distance_m)
                a = math.radians(az)
                pos = aim + vec3(math.sin(a) * horiz, -math.cos(a) * horiz, 0.0)
                pos[2] = aim[2] + dz
                q = look_at_pose(pos, aim, roll).orientation
                if plan.aim_jitter_deg > 0:
                    yaw = rng.uniform(-jit, jit)
                    pitch = rng.uniform(-jit, jit)
                    q = quat_mul(
                        quat_mul(quat_from_axis_angle(vec3(0, 0, 1), yaw), q),
                        quat_from_axis_angle(vec3(1, 0, 0), pitch),
                    )
                views.append((Pose(pos, q), plan.intrinsics))
    return views


def generate_marker_path(scene: Scene, class_index: int, view, cfg: MarkerPathConfig):
    """Serpentine sweep points on all surfaces of one class, filtered to the
    points actually visible from the camera.

    A point survives when (a) its outward normal faces the camera strictly
    and (b) the camera ray toward it meets nothing more than 1e-4 m closer
    than the point itself, i.e. its nearest scene hit is the point (points on
    face borders may graze past the slab test, which is equivalent and
    numerically stable). Returns (surface point, float pixel coords) pairs.
    """
    pose, k = view
    if not (0 <= class_index < scene.num_classes):
        raise VoiError(f"unknown class index {class_index}")
    shapes = scene.shapes_for_class(class_index)
    step = cfg.step_m
    if class_index >= scene.num_vois and cfg.bg_step_m is not None:
        step = cfg.bg_step_m

    out = []
    for shape in shapes:
        pts, nrms = shape.surface_grid(step, cfg.serpentine)
        if len(pts) == 0:
            continue
        to_cam = pose.position - pts
        facing = np.einsum("ij,ij->i", to_cam, nrms) > 0.0
        pts, nrms = pts[facing], nrms[facing]
        if len(pts) == 0:
            continue
        dirs = pts - pose.position
        dist = np.linalg.norm(dirs, axis=1)
        dirs = dirs / dist[:, None]
        origins = np.broadcast_to(pose.position, dirs.shape).copy()
        t, _prim, _cls, _n = intersect_rays(scene, origins, dirs)
        visible = ~(np.isfinite(t) & (t < dist - 1e-4))
        for p in pts[visible]:
            pix = project(p, pose, k)
            if pix is None:
                continue
            if 0 <= pix[0] <= k.width_px - 1 and 0 <= pix[1] <= k.height_px - 1:
                out.append((p, pix))
    if not out:
        log.warning("class %d has no visible marker points from this view", class_index)
    return out


# ---------------------------------------------------------------------------
# dataset generation

_WORKER_CTX = {}


def _init_worker(scene, style, thumb_side, keep_full):
    _WORKER_CTX.update(scene=scene, style=style, thumb_side=thumb_side, keep_full=keep_full)


def _render_job(job):
    """Render one (view, class, marker point) frame and crop the thumbnail.

    Pure function of its arguments plus the immutable worker context; safe to
    execute in any order across processes.
    """
    scene = _WORKER_CTX["scene"]
    style = _WORKER_CTX["style"]
    side = _WORKER_CTX["thumb_side"]
    keep_full = _WORKER_CTX["keep_full"]
    pose, k, px, py = job["pose"], job["k"], job["px"], job["py"]
    left, top, _dx, _dy = place_crop_window(px, py, side, k.width_px, k.height_px)
    if keep_full:
        full = overlay_marker(render_frame(scene, pose, k), px, py, style)
        thumb = crop(full, left, top, side)
        return thumb, full
    region = render_region(scene, pose, k, left, top, side, side)
    thumb = overlay_marker(region, px - left, py - top, style)
    return thumb, None


def generate_dataset(
    scene: Scene,
    plan: CameraSamplingPlan,
    pathcfg: MarkerPathConfig,
    style: MarkerStyle,
    out_dir,
    *,
    seed: int = 0,
    thumb_side: int = 224,
    include_defaults: bool = True,
    keep_full_frames: bool = False,
    max_points_per_class_per_view: int | None = None,
    workers: int = 1,
) -> DatasetManifest:
    """Sweep the marker over every class under every camera view and persist
    marker-overlaid thumbnails plus the dataset manifest.

    Deterministic for a fixed seed at any worker count: jobs are enumerated in
    (view, class, sweep order) and written by job index. Sweep points whose
    rounded marker pixel lands on a different class (possible right at VOI
    borders) are skipped so every manifest row re-intersects to its own label.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    if keep_full_frames:
        (out_dir / "frames_full").mkdir(parents=True, exist_ok=True)

    views = sample_cameras(plan, scene, seed=seed)
    class_ids = list(range(scene.num_vois)) + ([scene.default_class, scene.environment_class] if include_defaults else [])

    jobs = []
    seen_points = {c: 0 for c in class_ids}
    for pose, k in views:
        for cls in class_ids:
            path_pts = generate_marker_path(scene, cls, (pose, k), pathcfg)
            if max_points_per_class_per_view is not None and len(path_pts) > max_points_per_class_per_view:
                idx = np.linspace(0, len(path_pts) - 1, max_points_per_class_per_view).round().astype(int)
                path_pts = [path_pts[i] for i in idx]
            for point, pix in path_pts:
                px, py = int(round(pix[0])), int(round(pix[1]))
                if not (0 <= px < k.width_px and 0 <= py < k.height_px):
                    continue
                check = intersect_ray(scene, ray_for_pixel(pose, k, px, py))
                label = check.class_index if check is not None else scene.environment_class
                if label != cls:
                    continue  # marker rounded onto a neighboring class
                seen_points[cls] += 1
                jobs.append({"pose": pose, "k": k, "px": px, "py": py, "cls": cls, "marker": point})

    _init_worker(scene, style, thumb_side, keep_full_frames)
    if workers > 1:
        pool = multiprocessing.Pool(workers, initializer=_init_worker, initargs=(scene, style, thumb_side, keep_full_frames))
        results = pool.imap(_render_job, jobs, chunksize=8)
    else:
        pool = None
        results = map(_render_job, jobs)

    rows = []
    try:
        for i, (job, (thumb, full)) in enumerate(zip(jobs, results)):
            rel = f"images/img_{i:06d}.png"
            thumb.save_png(out_dir / rel)
            if full is not None:
                full.save_png(out_dir / "frames_full" / f"frame_{i:06d}.png")
            rows.append(
                ManifestRow(
                    path=rel,
                    class_index=job["cls"],
                    px=job["px"],
                    py=job["py"],
                    cam_q=tuple(float(v) for v in job["pose"].orientation),
                    cam_pos=tuple(float(v) for v in job["pose"].position),
                    marker=tuple(float(v) for v in job["marker"]),
                )
            )
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    under = tuple(sorted(c for c, n in seen_points.items() if n == 0))
    for c in under:
        log.warning("class %d produced no dataset rows (underrepresented)", c)
    manifest = DatasetManifest(classes=scene.num_classes, seed=seed, rows=rows, underrepresented=under)
    manifest.write(out_dir / "manifest.csv")
    return manifest


def manifest_view(row: ManifestRow):
    """Reconstruct the (Pose, marker ray) geometry recorded in a manifest row."""
    pose = Pose(np.array(row.cam_pos), np.array(row.cam_q))
    return pose


def verify_manifest(scene: Scene, manifest: DatasetManifest, k: CameraIntrinsics) -> float:
    """Fraction of rows whose recorded marker pixel re-intersects to the
    recorded class; 1.0 means the dataset is self-consistent."""
    if not manifest.rows:
        raise VoiError("empty manifest")
    good = 0
    for row in manifest.rows:
        pose = manifest_view(row)
        hit = intersect_ray(scene, ray_for_pixel(pose, k, row.px, row.py))
        label = hit.class_index if hit is not None else scene.environment_class
        good += label == row.class_index
    return good / len(manifest.rows)
