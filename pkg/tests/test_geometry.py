import math

import numpy as np
import pytest

from locmap.errors import DegenerateGeometry, NonPositiveDepth
from locmap.geometry import (
    Camera,
    CameraModel,
    Pose,
    backproject,
    compose,
    epipolar_distance,
    inverse,
    project,
    rotation_angle_deg,
    triangulate,
)

from conftest import (
    lookat_pose,
    pose_matrix_oracle,
    quat_dist,
    random_pose,
    yaw_pose,
)


class TestCompose:
    def test_identity_neutral(self):
        rng = np.random.default_rng(0)
        p = random_pose(rng)
        ident = Pose.identity()
        for q in (compose(ident, p), compose(p, ident)):
            assert quat_dist(q.q, p.q) < 1e-12
            assert np.allclose(q.t, p.t, atol=1e-12)

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = random_pose(rng)
            r = compose(p, inverse(p))
            assert quat_dist(r.q, Pose.identity().q) < 1e-12
            assert np.linalg.norm(r.t) < 1e-12

    def test_matches_matrix_product(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            got = pose_matrix_oracle(compose(a, b))
            want = pose_matrix_oracle(a) @ pose_matrix_oracle(b)
            assert np.allclose(got, want, atol=1e-12)

    def test_associative(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            a, b, c = (random_pose(rng) for _ in range(3))
            lhs = compose(compose(a, b), c)
            rhs = compose(a, compose(b, c))
            assert quat_dist(lhs.q, rhs.q) < 1e-10
            assert np.allclose(lhs.t, rhs.t, atol=1e-10)


class TestInverse:
    def test_identity(self):
        p = inverse(Pose.identity())
        assert quat_dist(p.q, Pose.identity().q) == 0
        assert np.all(p.t == 0)

    def test_pure_translation(self):
        p = Pose(np.array([1.0, 0, 0, 0]), np.array([1.0, -2.0, 3.0]))
        inv = inverse(p)
        assert np.allclose(inv.t, [-1.0, 2.0, -3.0], atol=1e-15)

    def test_matches_matrix_inverse(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            p = random_pose(rng)
            got = pose_matrix_oracle(inverse(p))
            want = np.linalg.inv(pose_matrix_oracle(p))
            assert np.allclose(got, want, atol=1e-12)

    def test_involution(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            p = random_pose(rng)
            pp = inverse(inverse(p))
            assert quat_dist(pp.q, p.q) < 1e-12
            assert np.allclose(pp.t, p.t, atol=1e-12)


class TestProject:
    def test_principal_ray(self, cam100):
        px = project(cam100, Pose.identity(), np.array([0.0, 0.0, 1.0]))
        assert np.allclose(px, [50.0, 50.0])

    def test_offset_point(self, cam100):
        px = project(cam100, Pose.identity(), np.array([0.5, 0.0, 1.0]))
        assert np.allclose(px, [100.0, 50.0])

    def test_behind_camera(self, cam100):
        assert project(cam100, Pose.identity(), np.array([0.0, 0.0, -1.0])) is None

    def test_simple_pinhole_model(self):
        cam = Camera("s", CameraModel.SIMPLE_PINHOLE, 100, 100, (100.0, 50.0, 50.0))
        px = project(cam, Pose.identity(), np.array([0.5, 0.25, 1.0]))
        assert np.allclose(px, [100.0, 75.0])


class TestBackproject:
    def test_principal_point_depth(self, cam100):
        X = backproject(cam100, Pose.identity(), np.array([50.0, 50.0]), 2.0)
        assert np.allclose(X, [0.0, 0.0, 2.0], atol=1e-12)

    def test_nonpositive_depth_rejected(self, cam100):
        with pytest.raises(NonPositiveDepth):
            backproject(cam100, Pose.identity(), np.array([50.0, 50.0]), 0.0)

    def test_roundtrip_with_project(self, cam_vga):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            pose = random_pose(rng, t_scale=1.0)
            px = np.array([rng.uniform(0, 640), rng.uniform(0, 480)])
            depth = rng.uniform(0.5, 20.0)
            X = backproject(cam_vga, pose, px, depth)
            px2 = project(cam_vga, pose, X)
            assert px2 is not None
            assert np.linalg.norm(px2 - px) < 1e-9

    def test_yawed_pose_lands_on_rotated_axis(self, cam100):
        # 90 deg yaw about z maps the camera axis onto a rotated world ray
        pose = yaw_pose(90.0)
        X = backproject(cam100, pose, np.array([50.0, 50.0]), 1.0)
        R = pose_matrix_oracle(pose)[:3, :3]
        want = R.T @ (np.array([0.0, 0.0, 1.0]) - pose.t)
        assert np.allclose(X, want, atol=1e-12)


class TestTriangulate:
    def test_exact_two_views(self, cam_vga):
        X = np.array([0.0, 0.0, 5.0])
        pose_a = lookat_pose([-0.5, 0.0, 0.0], X)
        pose_b = lookat_pose([0.5, 0.0, 0.0], X)
        obs = [
            (cam_vga, pose_a, project(cam_vga, pose_a, X)),
            (cam_vga, pose_b, project(cam_vga, pose_b, X)),
        ]
        got, residuals = triangulate(obs)
        assert np.linalg.norm(got - X) < 1e-9
        assert np.max(residuals) < 1e-9

    def test_noisy_ten_views(self, cam_vga):
        rng = np.random.default_rng(7)
        X = np.array([0.3, -0.2, 5.0])
        obs = []
        for k in range(10):
            angle = 2 * math.pi * k / 10
            center = np.array([3 * math.cos(angle), 3 * math.sin(angle), 0.0])
            pose = lookat_pose(center, X)
            px = project(cam_vga, pose, X) + rng.normal(0, 0.5, 2)
            obs.append((cam_vga, pose, px))
        got, _ = triangulate(obs)
        assert np.linalg.norm(got - X) < 0.005  # < 5 mm at 5 m depth

    def test_zero_baseline_degenerate(self, cam_vga):
        pose = lookat_pose([0, -3, 0], [0, 0, 5])
        px = project(cam_vga, pose, np.array([0.0, 0.0, 5.0]))
        with pytest.raises(DegenerateGeometry):
            triangulate([(cam_vga, pose, px), (cam_vga, pose, px)])

    def test_residuals_self_consistent(self, cam_vga):
        rng = np.random.default_rng(8)
        X = np.array([0.5, 0.1, 6.0])
        obs = []
        for k in range(5):
            center = np.array([2 * math.cos(k), 2 * math.sin(k), 0.5 * k - 1])
            pose = lookat_pose(center, X)
            obs.append((cam_vga, pose, project(cam_vga, pose, X) + rng.normal(0, 1.0, 2)))
        got, residuals = triangulate(obs)
        for res, (cam, pose, px) in zip(residuals, obs):
            direct = np.linalg.norm(project(cam, pose, got) - px)
            assert abs(direct - res) < 1e-12


class TestRotationAngle:
    def test_same_quaternion(self):
        rng = np.random.default_rng(9)
        p = random_pose(rng)
        assert rotation_angle_deg(p.q, p.q) == 0.0

    def test_double_cover(self):
        rng = np.random.default_rng(10)
        q = random_pose(rng).q
        assert rotation_angle_deg(q, -q) == 0.0

    def test_ninety_degree_yaw(self):
        assert abs(rotation_angle_deg(yaw_pose(90).q, Pose.identity().q) - 90.0) < 1e-9

    def test_symmetric_and_triangle_inequality(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            a, b, c = (random_pose(rng).q for _ in range(3))
            assert abs(rotation_angle_deg(a, b) - rotation_angle_deg(b, a)) < 1e-9
            assert rotation_angle_deg(a, c) <= (
                rotation_angle_deg(a, b) + rotation_angle_deg(b, c) + 1e-9
            )


class TestEpipolarDistance:
    def test_true_correspondence_is_zero(self, cam_vga):
        rng = np.random.default_rng(12)
        for _ in range(50):
            X = rng.uniform(-1, 1, 3) + np.array([0, 0, 6.0])
            pa = lookat_pose(rng.uniform(-2, 2, 3) * [1, 1, 0.2], X)
            pb = lookat_pose(rng.uniform(-2, 2, 3) * [1, 1, 0.2] + [0, -4, 0], X)
            pxa = project(cam_vga, pa, X)
            pxb = project(cam_vga, pb, X)
            if pxa is None or pxb is None:
                continue
            assert epipolar_distance(cam_vga, pa, pxa, cam_vga, pb, pxb) < 1e-7

    def test_orthogonal_displacement_measures_pixels(self, cam_vga):
        # symmetric stereo: horizontal baseline, parallel axes -> horizontal
        # epipolar lines, so a 3 px vertical displacement reads as 3 px
        pa = Pose.identity()
        pb = Pose(np.array([1.0, 0, 0, 0]), np.array([-1.0, 0.0, 0.0]))
        X = np.array([0.3, 0.2, 5.0])
        pxa = project(cam_vga, pa, X)
        pxb = project(cam_vga, pb, X) + np.array([0.0, 3.0])
        d = epipolar_distance(cam_vga, pa, pxa, cam_vga, pb, pxb)
        assert abs(d - 3.0) < 1e-9

    def test_zero_baseline_sentinel(self, cam_vga):
        p = yaw_pose(10.0, t=(0.5, 0.2, 1.0))
        d = epipolar_distance(
            cam_vga, p, np.array([10.0, 20.0]), cam_vga, p, np.array([30.0, 40.0])
        )
        assert d == math.inf
