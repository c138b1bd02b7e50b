import logging
import math

import numpy as np
import pytest

from voiannotate.geometry import (
    Box,
    CameraIntrinsics,
    Material,
    Scene,
    VOI,
    Cylinder,
    intersect_ray,
    project,
    ray_for_pixel,
    vec3,
)
from voiannotate.images import Image, place_crop_window
from voiannotate.render import (
    BACKGROUND_RGB,
    CameraSamplingPlan,
    DatasetManifest,
    MarkerPathConfig,
    MarkerStyle,
    generate_dataset,
    generate_marker_path,
    look_at_pose,
    overlay_marker,
    render_frame,
    sample_cameras,
    verify_manifest,
)

SMALL_K = CameraIntrinsics(width_px=160, height_px=120, focal_px=130.0)


def test_empty_scene_uniform_background():
    scene = Scene(vois=[], background=[])
    img = render_frame(scene, look_at_pose(vec3(0, -2, 1), vec3(0, 0, 1)), SMALL_K)
    expected = np.rint(BACKGROUND_RGB * 255).astype(np.uint8)
    assert (img.pixels == expected).all()


def test_lambert_shading_formula():
    # red face with normal (0,-1,0); light at 45 degrees in the n/z plane
    light = vec3(0, -1, 1) / math.sqrt(2)
    scene = Scene(
        vois=[VOI("b", 0, Box(vec3(0, 0, 0.5), vec3(0.5, 0.5, 0.5)), Material(np.array([1.0, 0, 0])))],
        background=[],
        light_dir=light,
        ambient=0.2,
    )
    pose = look_at_pose(vec3(0, -2.0, 0.5), vec3(0, 0, 0.5))
    img = render_frame(scene, pose, SMALL_K)
    ndotl = 1.0 / math.sqrt(2)
    expected = round(255 * (0.2 + 0.8 * ndotl))
    center = img.pixels[SMALL_K.height_px // 2, SMALL_K.width_px // 2]
    assert abs(int(center[0]) - expected) <= 1
    assert center[1] == 0 and center[2] == 0


def test_hard_shadow_uses_ambient_only():
    floor = Box(vec3(0, 0, -0.05), vec3(3.0, 3.0, 0.05))
    blocker = Box(vec3(0, 0, 0.5), vec3(0.2, 0.2, 0.2))
    scene = Scene(
        vois=[VOI("b", 0, blocker, Material(np.array([0.5, 0.5, 0.5])))],
        background=[(floor, Material(np.array([0.8, 0.8, 0.8])), 2)],
        light_dir=vec3(0, 0, 1.0),
        ambient=0.2,
    )
    pose = look_at_pose(vec3(0, -2.0, 1.5), vec3(0, 0, 0))
    img = render_frame(scene, pose, SMALL_K)

    shadow_px = project(vec3(0, 0, 0), pose, SMALL_K)
    lit_px = project(vec3(1.0, -1.0, 0), pose, SMALL_K)
    shadow_val = img.pixels[round(shadow_px[1]), round(shadow_px[0])]
    lit_val = img.pixels[round(lit_px[1]), round(lit_px[0])]
    assert abs(int(shadow_val[0]) - round(255 * 0.8 * 0.2)) <= 1
    assert abs(int(lit_val[0]) - round(255 * 0.8 * 1.0)) <= 1


def test_render_deterministic(desk_scene):
    pose = look_at_pose(vec3(0, -1.0, 1.3), vec3(0, 0, 1.1))
    a = render_frame(desk_scene, pose, SMALL_K)
    b = render_frame(desk_scene, pose, SMALL_K)
    assert (a.pixels == b.pixels).all()


class TestOverlay:
    def base(self):
        return Image(np.full((60, 80, 3), 10, dtype=np.uint8))

    def test_center_gets_fill(self):
        style = MarkerStyle(radius_px=5, fill_rgb=(200, 30, 30), ring_rgb=(255, 255, 255), ring_px=2)
        out = overlay_marker(self.base(), 40, 30, style)
        assert tuple(out.pixels[30, 40]) == (200, 30, 30)

    def test_pixel_at_reach_unchanged(self):
        style = MarkerStyle(radius_px=5, ring_px=2)
        out = overlay_marker(self.base(), 40, 30, style)
        assert tuple(out.pixels[30, 40 + 7]) == (10, 10, 10)

    def test_changed_count_matches_disc_area(self):
        style = MarkerStyle(radius_px=6, fill_rgb=(200, 30, 30), ring_rgb=(250, 250, 250), ring_px=2)
        out = overlay_marker(self.base(), 40, 30, style)
        changed = int((out.pixels != self.base().pixels).any(axis=2).sum())
        reach = style.radius_px + style.ring_px
        area = math.pi * reach * reach
        assert abs(changed - area) <= 2 * math.pi * reach + 4

    def test_out_of_bounds_center(self):
        with pytest.raises(Exception):
            overlay_marker(self.base(), 100, 30, MarkerStyle())


class TestMarkerPath:
    def test_square_face_5x5_grid(self):
        # 0.2 m face straight ahead; side faces are exactly edge-on -> culled
        box = Box(vec3(0, 0, 0.5), vec3(0.1, 0.02, 0.1))
        scene = Scene(vois=[VOI("b", 0, box, Material())], background=[])
        pose = look_at_pose(vec3(0, -1.0, 0.5), vec3(0, 0, 0.5))
        pts = generate_marker_path(scene, 0, (pose, CameraIntrinsics()), MarkerPathConfig(step_m=0.05))
        assert len(pts) == 25
        for p, _pix in pts:
            assert p[1] == pytest.approx(-0.02, abs=1e-12)

    def test_occluded_voi_yields_empty_plus_warning(self, caplog):
        box = Box(vec3(0, 0, 0.5), vec3(0.1, 0.02, 0.1))
        wall = Box(vec3(0, -0.5, 0.5), vec3(1.0, 0.05, 1.0))
        scene = Scene(vois=[VOI("b", 0, box, Material())], background=[(wall, Material(), 2)])
        pose = look_at_pose(vec3(0, -2.0, 0.5), vec3(0, 0, 0.5))
        with caplog.at_level(logging.WARNING):
            pts = generate_marker_path(scene, 0, (pose, CameraIntrinsics()), MarkerPathConfig(step_m=0.05))
        assert pts == []
        assert any("no visible marker points" in r.message for r in caplog.records)

    def test_cylinder_back_half_culled(self):
        cyl = Cylinder(vec3(0, 0, 0), vec3(0, 0, 1), 0.2, 0.4)
        scene = Scene(vois=[VOI("c", 0, cyl, Material())], background=[])
        cam_pos = vec3(0, -2.0, 0.2)
        pose = look_at_pose(cam_pos, vec3(0, 0, 0.2))
        pts = generate_marker_path(scene, 0, (pose, CameraIntrinsics()), MarkerPathConfig(step_m=0.05))
        assert pts
        for p, _pix in pts:
            if 1e-9 < p[2] < 0.4 - 1e-9:  # lateral point: outward radial normal
                normal = np.array([p[0], p[1], 0.0]) / np.hypot(p[0], p[1])
                assert (cam_pos - p) @ normal > 0


class TestSampleCameras:
    def test_product_count(self, desk_scene):
        plan = CameraSamplingPlan(azimuth_step_deg=15.0, roll_deg=(0.0,), aim_jitter_deg=0.0)
        views = sample_cameras(plan, desk_scene)
        assert len(views) == 7 * 3 * 1

    def test_azimuth_endpoints_present(self, desk_scene):
        plan = CameraSamplingPlan(azimuth_step_deg=15.0)
        assert plan.azimuths()[0] == -45.0 and plan.azimuths()[-1] == 45.0

    def test_distance_invariant(self, desk_scene):
        plan = CameraSamplingPlan(aim_jitter_deg=3.0, roll_deg=(-10.0, 0.0, 10.0))
        aim = desk_scene.bbox_center()
        for pose, _k in sample_cameras(plan, desk_scene, seed=3):
            assert np.linalg.norm(pose.position - aim) == pytest.approx(1.0, abs=1e-9)

    def test_extra_heights_union(self, desk_scene):
        plan = CameraSamplingPlan(eye_heights_m=(1.5, 1.6), extra_heights_m=(1.6, 1.2))
        assert plan.heights() == [1.5, 1.6, 1.2]


def tiny_dataset_scene():
    # thin box at the aim height so only the front face is swept: 2x2 interior
    # grid points at step 0.1
    box = Box(vec3(0, 0, 0.3), vec3(0.08, 0.01, 0.08))
    floor = Box(vec3(0, 0, 0.05), vec3(0.4, 0.4, 0.05))
    return Scene(
        vois=[VOI("b", 0, box, Material(np.array([0.9, 0.2, 0.2])))],
        background=[(floor, Material(np.array([0.4, 0.4, 0.45])), 2)],
    )


def tiny_plan():
    # two views on the 0-degree axis: the thin box's side faces stay edge-on
    return CameraSamplingPlan(
        azimuth_start_deg=0.0,
        azimuth_stop_deg=0.0,
        azimuth_step_deg=20.0,
        eye_heights_m=(0.28, 0.32),
        distance_m=0.9,
        aim_jitter_deg=0.0,
        intrinsics=CameraIntrinsics(width_px=320, height_px=240, focal_px=300.0),
    )


class TestGenerateDataset:
    def test_row_count_without_defaults(self, tmp_path):
        manifest = generate_dataset(
            tiny_dataset_scene(),
            tiny_plan(),
            MarkerPathConfig(step_m=0.1),
            MarkerStyle(radius_px=3, ring_px=1),
            tmp_path,
            seed=5,
            thumb_side=48,
            include_defaults=False,
        )
        assert len(manifest.rows) == 2 * 4  # 2 views x 2x2 grid
        assert all(r.class_index == 0 for r in manifest.rows)
        for r in manifest.rows:
            assert (tmp_path / r.path).exists()

    def test_defaults_present_and_marker_projection(self, tmp_path):
        scene = tiny_dataset_scene()
        manifest = generate_dataset(
            scene,
            tiny_plan(),
            MarkerPathConfig(step_m=0.1, bg_step_m=0.35),
            MarkerStyle(radius_px=3, ring_px=1),
            tmp_path,
            seed=5,
            thumb_side=48,
        )
        classes = {r.class_index for r in manifest.rows}
        assert scene.environment_class in classes
        k = tiny_plan().intrinsics
        from voiannotate.geometry import Pose

        for r in manifest.rows:
            pose = Pose(np.array(r.cam_pos), np.array(r.cam_q))
            px, py = project(np.array(r.marker), pose, k)
            assert (round(px), round(py)) == (r.px, r.py)
        assert verify_manifest(scene, manifest, k) == 1.0

    def test_same_seed_byte_identical(self, tmp_path):
        args = (tiny_dataset_scene(), tiny_plan(), MarkerPathConfig(step_m=0.1), MarkerStyle(radius_px=3, ring_px=1))
        m1 = generate_dataset(*args, tmp_path / "a", seed=9, thumb_side=48, include_defaults=False)
        m2 = generate_dataset(*args, tmp_path / "b", seed=9, thumb_side=48, include_defaults=False)
        assert (tmp_path / "a/manifest.csv").read_bytes() == (tmp_path / "b/manifest.csv").read_bytes()
        for r1, r2 in zip(m1.rows, m2.rows):
            assert (tmp_path / "a" / r1.path).read_bytes() == (tmp_path / "b" / r2.path).read_bytes()

    def test_worker_count_does_not_change_output(self, tmp_path):
        args = (tiny_dataset_scene(), tiny_plan(), MarkerPathConfig(step_m=0.1), MarkerStyle(radius_px=3, ring_px=1))
        generate_dataset(*args, tmp_path / "w1", seed=4, thumb_side=48, include_defaults=False, workers=1)
        generate_dataset(*args, tmp_path / "w2", seed=4, thumb_side=48, include_defaults=False, workers=2)
        assert (tmp_path / "w1/manifest.csv").read_bytes() == (tmp_path / "w2/manifest.csv").read_bytes()
        assert (tmp_path / "w1/images/img_000000.png").read_bytes() == (tmp_path / "w2/images/img_000000.png").read_bytes()

    def test_underrepresented_flag(self, tmp_path):
        # VOI fully hidden behind a wall -> zero rows for class 0
        box = Box(vec3(0, 0.4, 0.3), vec3(0.05, 0.01, 0.05))
        wall = Box(vec3(0, 0.2, 0.3), vec3(0.6, 0.02, 0.6))
        scene = Scene(
            vois=[VOI("hidden", 0, box, Material())],
            background=[(wall, Material(), 1)],
        )
        manifest = generate_dataset(
            scene,
            tiny_plan(),
            MarkerPathConfig(step_m=0.1, bg_step_m=0.3),
            MarkerStyle(radius_px=3, ring_px=1),
            tmp_path,
            seed=0,
            thumb_side=48,
        )
        assert 0 in manifest.underrepresented
        header = (tmp_path / "manifest.csv").read_text().splitlines()[0]
        assert "underrepresented=" in header

    def test_manifest_round_trip(self, tmp_path):
        manifest = generate_dataset(
            tiny_dataset_scene(),
            tiny_plan(),
            MarkerPathConfig(step_m=0.1),
            MarkerStyle(radius_px=3, ring_px=1),
            tmp_path,
            seed=5,
            thumb_side=48,
            include_defaults=False,
        )
        again = DatasetManifest.read(tmp_path / "manifest.csv")
        assert again.classes == manifest.classes and again.seed == manifest.seed
        assert [r.path for r in again.rows] == [r.path for r in manifest.rows]
        assert again.rows[0].cam_q == manifest.rows[0].cam_q


def test_place_crop_window_center_and_shift():
    assert place_crop_window(640, 480, 224, 1280, 960) == (528, 368, 0, 0)
    left, top, dx, dy = place_crop_window(10, 480, 224, 1280, 960)
    assert (left, top) == (0, 368)
    assert (dx, dy) == (-102, 0)
