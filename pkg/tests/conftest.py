import math

import numpy as np
import pytest

from locmap.geometry import Camera, CameraModel, Pose, quat_from_rotmat


def random_unit_quat(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_pose(rng, t_scale: float = 5.0) -> Pose:
    return Pose(random_unit_quat(rng), rng.uniform(-t_scale, t_scale, 3))


def quat_dist(q1, q2) -> float:
    """Sign-agnostic quaternion distance; resolves far below what the
    arccos-based angle can."""
    q1 = np.asarray(q1)
    q2 = np.asarray(q2)
    return float(min(np.linalg.norm(q1 - q2), np.linalg.norm(q1 + q2)))


def rotmat_oracle(q) -> np.ndarray:
    """Independent quaternion-to-matrix path (outer product form), used to
    cross-check pose algebra against plain 4x4 matrix arithmetic."""
    w, x, y, z = q
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def pose_matrix_oracle(p: Pose) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rotmat_oracle(p.q)
    m[:3, 3] = p.t
    return m


def lookat_pose(center, target, up=(0.0, 0.0, 1.0)) -> Pose:
    center = np.asarray(center, dtype=float)
    target = np.asarray(target, dtype=float)
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    if abs(float(z @ up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(quat_from_rotmat(R), -(R @ center))


@pytest.fixture
def cam100() -> Camera:
    return Camera("cam", CameraModel.PINHOLE, 100, 100, (100.0, 100.0, 50.0, 50.0))


@pytest.fixture
def cam_vga() -> Camera:
    return Camera("cam", CameraModel.PINHOLE, 640, 480, (600.0, 600.0, 320.0, 240.0))


def yaw_pose(deg: float, t=(0.0, 0.0, 0.0)) -> Pose:
    half = math.radians(deg) / 2
    return Pose(np.array([math.cos(half), 0.0, 0.0, math.sin(half)]), np.asarray(t, dtype=float))
