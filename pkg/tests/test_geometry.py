import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import march_ray, random_rays, random_scene
from voiannotate.geometry import (
    Box,
    CameraIntrinsics,
    Cylinder,
    Material,
    Pose,
    Ray,
    Scene,
    SceneParseError,
    VOI,
    VoiError,
    intersect_ray,
    parse_scene,
    project,
    quat_identity,
    quat_slerp,
    ray_for_pixel,
    vec3,
    visual_angle,
)

IDENTITY_POSE = Pose(vec3(0, 0, 0), quat_identity())


def box_scene(center=(0, 0, 0), half=(0.5, 0.5, 0.5)):
    return Scene(vois=[VOI("b", 0, Box(vec3(*center), vec3(*half)), Material())], background=[])


class TestParseScene:
    def test_minimal_document(self):
        scene = parse_scene("voi b box 0 0 1 0.2 0.2 0.2\nbg env box 0 0 -0.5 3 3 0.5\n")
        assert scene.num_vois == 1
        assert scene.num_classes == 3
        assert scene.class_names() == ["b", "object-no-voi", "environment"]

    def test_ten_vois_give_twelve_classes(self):
        text = "\n".join(f"voi v{i} box {i} 0 0 0.1 0.1 0.1" for i in range(10))
        assert parse_scene(text).num_classes == 12

    def test_duplicate_id(self):
        text = "voi display box 0 0 0 1 1 1\nvoi display box 2 0 0 1 1 1"
        with pytest.raises(SceneParseError, match="duplicate id"):
            parse_scene(text)
        try:
            parse_scene(text)
        except SceneParseError as exc:
            assert exc.line_no == 2

    def test_non_positive_dimension(self):
        with pytest.raises(SceneParseError, match="non-positive"):
            parse_scene("voi b box 0 0 0 1 -1 1")

    def test_unknown_shape_kind(self):
        with pytest.raises(SceneParseError, match="unknown shape kind"):
            parse_scene("voi b sphere 0 0 0 1")

    def test_materials_attach_by_id(self):
        scene = parse_scene("material b 0.9 0.1 0.1\nvoi b box 0 0 0 1 1 1")
        assert np.allclose(scene.vois[0].material.albedo, [0.9, 0.1, 0.1])

    def test_catalog_dense_with_defaults_last(self):
        scene = parse_scene(
            "voi a box 0 0 0 1 1 1\nvoi b cyl 0 0 2 0 0 1 0.5 1\nbg default box 5 0 0 1 1 1\nbg env box -5 0 0 1 1 1"
        )
        classes = [c for _s, _m, c in scene.primitives()]
        assert classes == [0, 1, 2, 3]
        assert scene.default_class == 2 and scene.environment_class == 3

    def test_commap_and_blank_lines(self):
        scene = parse_scene("# header\n\nvoi b box 0 0 0 1 1 1  # trailing\n")
        assert scene.num_vois == 1


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        k = CameraIntrinsics()
        assert project(vec3(0, 0, 1.0), IDENTITY_POSE, k) == (k.cx, k.cy)

    def test_similar_triangles(self):
        k = CameraIntrinsics(focal_px=1000.0)
        px, py = project(vec3(0.1, 0, 1.0), IDENTITY_POSE, k)
        assert px == pytest.approx(k.cx + 100.0, abs=1e-9)
        assert py == pytest.approx(k.cy, abs=1e-9)

    def test_behind_camera(self):
        assert project(vec3(0, 0, -1.0), IDENTITY_POSE, CameraIntrinsics()) is None

    def test_principal_ray_is_forward(self):
        k = CameraIntrinsics()
        ray = ray_for_pixel(IDENTITY_POSE, k, k.cx, k.cy)
        assert np.allclose(ray.direction, [0, 0, 1])

    def test_corner_pixel_has_lateral_components(self):
        ray = ray_for_pixel(IDENTITY_POSE, CameraIntrinsics(), 0, 0)
        assert ray.direction[0] != 0 and ray.direction[1] != 0

    def test_out_of_bounds_pixel(self):
        with pytest.raises(VoiError):
            ray_for_pixel(IDENTITY_POSE, CameraIntrinsics(), -1, 0)

    def test_round_trip_100_random_pixels(self):
        rng = np.random.default_rng(7)
        k = CameraIntrinsics()
        rot = rng.standard_normal(4)
        pose = Pose(rng.standard_normal(3), rot / np.linalg.norm(rot))
        for _ in range(100):
            px = rng.uniform(0, k.width_px - 1)
            py = rng.uniform(0, k.height_px - 1)
            ray = ray_for_pixel(pose, k, px, py)
            t = rng.uniform(0.1, 50.0)
            qx, qy = project(ray.origin + t * ray.direction, pose, k)
            assert abs(qx - px) < 1e-6 and abs(qy - py) < 1e-6


class TestIntersect:
    def test_axis_aligned_box(self):
        hit = intersect_ray(box_scene(), Ray(vec3(0, 0, -2.0), vec3(0, 0, 1.0)))
        assert hit.t == pytest.approx(1.5, abs=1e-12)
        assert np.allclose(hit.normal, [0, 0, -1])
        assert hit.class_index == 0

    def test_ray_from_inside_box_exits(self):
        hit = intersect_ray(box_scene(), Ray(vec3(0, 0, 0), vec3(0, 0, 1.0)))
        assert hit.t == pytest.approx(0.5, abs=1e-12)

    def test_grazing_cylinder_discriminant(self):
        # lateral offset exactly r: tangent (discriminant zero); r+1e-3: miss
        cyl = Cylinder(vec3(0, 0, 0), vec3(0, 0, 1), 0.1, 1.0)
        scene = Scene(vois=[VOI("c", 0, cyl, Material())], background=[])
        tangent = intersect_ray(scene, Ray(vec3(-1.0, 0.1, 0.5), vec3(1, 0, 0)))
        assert tangent is not None and tangent.t == pytest.approx(1.0, abs=1e-6)
        assert intersect_ray(scene, Ray(vec3(-1.0, 0.101, 0.5), vec3(1, 0, 0))) is None

    def test_cylinder_cap_hit(self):
        cyl = Cylinder(vec3(0, 0, 0), vec3(0, 0, 1), 0.5, 1.0)
        scene = Scene(vois=[VOI("c", 0, cyl, Material())], background=[])
        hit = intersect_ray(scene, Ray(vec3(0.2, 0, 3.0), vec3(0, 0, -1.0)))
        assert hit.t == pytest.approx(2.0, abs=1e-12)
        assert np.allclose(hit.normal, [0, 0, 1])

    def test_voi_occludes_background(self):
        # box front face at y=-0.1 (t=0.9); background wall at y=1.8 (t=2.8)
        scene = Scene(
            vois=[VOI("v", 0, Box(vec3(0, 0, 0), vec3(0.1, 0.1, 0.1)), Material())],
            background=[(Box(vec3(0, 2.0, 0), vec3(2, 0.2, 2)), Material(), 1)],
        )
        hit = intersect_ray(scene, Ray(vec3(0, -1.0, 0), vec3(0, 1, 0)))
        assert hit.class_index == 0
        assert hit.t == pytest.approx(0.9, abs=1e-12)

    def test_miss_returns_none(self):
        assert intersect_ray(box_scene(), Ray(vec3(0, -5, 0), vec3(0, -1, 0))) is None

    def test_march_oracle_agreement(self, subtests=None):
        rng = np.random.default_rng(42)
        disagreements = 0
        for s in range(10):
            scene = random_scene(rng, n_prims=int(rng.integers(3, 10)))
            origins, dirs = random_rays(rng, 20)
            for o, d in zip(origins, dirs):
                hit = intersect_ray(scene, Ray(o, d))
                t_m, cls_m = march_ray(scene, o, d)
                if hit is None:
                    assert t_m is None
                else:
                    assert t_m is not None
                    assert cls_m == hit.class_index
                    assert abs(t_m - hit.t) <= 2e-4
        assert disagreements == 0


class TestVisualAngle:
    def test_zero_diameter(self):
        assert visual_angle(0.0, 1.0) == 0.0

    def test_button_at_955mm(self):
        assert visual_angle(0.010, 0.955) == pytest.approx(0.600, abs=1e-3)

    def test_button_at_one_meter(self):
        assert visual_angle(0.010, 1.0) == pytest.approx(0.573, abs=1e-3)

    def test_closed_form(self):
        assert visual_angle(0.3, 2.0) == pytest.approx(math.degrees(2 * math.atan(0.075)), abs=1e-12)

    def test_non_positive_distance(self):
        with pytest.raises(VoiError):
            visual_angle(0.01, 0.0)


class TestQuaternions:
    def test_slerp_endpoints_and_midpoint(self):
        q0 = quat_identity()
        q1 = np.array([math.cos(math.pi / 4), math.sin(math.pi / 4), 0, 0])  # 90 deg about x
        assert np.allclose(quat_slerp(q0, q1, 0.0), q0)
        assert np.allclose(quat_slerp(q0, q1, 1.0), q1)
        mid = quat_slerp(q0, q1, 0.5)
        assert mid[0] == pytest.approx(math.cos(math.pi / 8), abs=1e-12)

    def test_pose_rejects_unnormalized_quaternion(self):
        with pytest.raises(VoiError):
            Pose(vec3(0, 0, 0), np.array([1.0, 1.0, 0, 0]))


@settings(max_examples=60, deadline=None)
@given(
    px=st.floats(0, 1279), py=st.floats(0, 959),
    t=st.floats(0.05, 30.0),
)
def test_project_ray_round_trip_property(px, py, t):
    k = CameraIntrinsics()
    ray = ray_for_pixel(IDENTITY_POSE, k, px, py)
    qx, qy = project(ray.origin + t * ray.direction, IDENTITY_POSE, k)
    assert abs(qx - px) < 1e-6 and abs(qy - py) < 1e-6
