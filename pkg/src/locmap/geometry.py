"""SE(3) poses, pinhole projection, triangulation, and epipolar arithmetic.

Conventions used throughout the package:
  * Pose stores a world-to-camera transform: x_cam = R(q) @ x_world + t.
  * Quaternions are Hamilton (w, x, y, z), unit norm, canonicalized so the
    first nonzero component is positive (w >= 0 in practice).
  * The camera center in world coordinates is c = -R(q).T @ t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateGeometry,
    InvariantViolation,
    NonPositiveDepth,
)

_QUAT_NORM_TOL = 1e-9


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n < 1e-12:
        raise InvariantViolation(f"quaternion has invalid norm {n}")
    if abs(n - 1.0) > _QUAT_NORM_TOL:
        q = q / n
    for comp in q:
        if comp != 0.0:
            if comp < 0.0:
                q = -q
            break
    return q


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform (unit quaternion + translation, meters)."""

    q: np.ndarray  # (4,) w, x, y, z
    t: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "q", _canonical_quat(self.q))
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise InvariantViolation("pose translation must be finite")
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_rt(R: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(quat_from_rotmat(R), np.asarray(t, dtype=float))

    @property
    def R(self) -> np.ndarray:
        return rotmat(self.q)

    def center(self) -> np.ndarray:
        """Camera center in world coordinates, c = -R.T @ t."""
        return -self.R.T @ self.t

    def apply(self, x_world: np.ndarray) -> np.ndarray:
        """Map world points (3,) or (n, 3) into the camera frame."""
        x = np.asarray(x_world, dtype=float)
        return x @ self.R.T + self.t

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous world-to-camera matrix."""
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m


class CameraModel(Enum):
    SIMPLE_PINHOLE = "SIMPLE_PINHOLE"  # params (f, cx, cy)
    PINHOLE = "PINHOLE"  # params (fx, fy, cx, cy)


_PARAM_COUNT = {CameraModel.SIMPLE_PINHOLE: 3, CameraModel.PINHOLE: 4}


@dataclass(frozen=True)
class Camera:
    """Pinhole camera intrinsics; all parameters in pixels."""

    sensor_id: str
    model: CameraModel
    width: int
    height: int
    params: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.width <= 0 or self.height <= 0:
            raise InvariantViolation(
                f"camera {self.sensor_id!r}: non-positive image size"
            )
        want = _PARAM_COUNT[self.model]
        if len(self.params) != want:
            raise InvariantViolation(
                f"camera {self.sensor_id!r}: {self.model.value} expects {want} "
                f"params, got {len(self.params)}"
            )
        if self.fx <= 0 or self.fy <= 0:
            raise InvariantViolation(f"camera {self.sensor_id!r}: focal must be > 0")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvariantViolation(
                f"camera {self.sensor_id!r}: principal point outside image"
            )

    @property
    def fx(self) -> float:
        return self.params[0]

    @property
    def fy(self) -> float:
        return self.params[0] if self.model is CameraModel.SIMPLE_PINHOLE else self.params[1]

    @property
    def cx(self) -> float:
        return self.params[1] if self.model is CameraModel.SIMPLE_PINHOLE else self.params[2]

    @property
    def cy(self) -> float:
        return self.params[2] if self.model is CameraModel.SIMPLE_PINHOLE else self.params[3]

    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


# --- quaternion helpers ---

def rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit Hamilton quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_rotmat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return _canonical_quat(q)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
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


def slerp(q0: np.ndarray, q1: np.ndarray, lam: float) -> np.ndarray:
    """Spherical linear interpolation between unit quaternions, lam in [0, 1]."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(q0 @ q1)
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-12:
        out = (1 - lam) * q0 + lam * q1  # nearly parallel: nlerp is exact enough
    else:
        theta = math.acos(min(1.0, dot))
        s = math.sin(theta)
        out = (math.sin((1 - lam) * theta) / s) * q0 + (math.sin(lam * theta) / s) * q1
    return _canonical_quat(out)


# --- pose algebra ---

def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying b then a: x -> a(b(x))."""
    q = quat_mul(a.q, b.q)
    t = rotmat(a.q) @ b.t + a.t
    return Pose(q, t)


def inverse(p: Pose) -> Pose:
    qinv = np.array([p.q[0], -p.q[1], -p.q[2], -p.q[3]])
    return Pose(qinv, -(rotmat(qinv) @ p.t))


def rotation_angle_deg(q1: np.ndarray, q2: np.ndarray) -> float:
    """Relative rotation angle in degrees, in [0, 180]; sign-of-q agnostic.

    theta = 2 arccos |q1.q2|, evaluated in the atan2 form, which stays exact
    at 0 and 180 degrees where arccos loses precision.
    """
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    if float(q1 @ q2) < 0.0:
        q2 = -q2
    # |q1 - q2| = 2 sin(theta/4), |q1 + q2| = 2 cos(theta/4)
    d1 = float(np.linalg.norm(q1 - q2))
    d2 = float(np.linalg.norm(q1 + q2))
    return 4.0 * math.atan2(d1, d2) * 180.0 / math.pi


def pose_from_center(q: np.ndarray, center: np.ndarray) -> Pose:
    """Pose with given rotation and camera center (t = -R @ c)."""
    q = _canonical_quat(np.asarray(q, dtype=float))
    return Pose(q, -(rotmat(q) @ np.asarray(center, dtype=float)))


# --- projection ---

_MIN_DEPTH = 1e-9


def project(cam: Camera, pose: Pose, X: np.ndarray) -> Optional[np.ndarray]:
    """Pixel of world point X, or None if at/behind the camera plane."""
    xc = pose.apply(np.asarray(X, dtype=float).reshape(3))
    if xc[2] <= _MIN_DEPTH:
        return None
    return np.array(
        [cam.fx * xc[0] / xc[2] + cam.cx, cam.fy * xc[1] / xc[2] + cam.cy]
    )


def project_many(cam: Camera, pose: Pose, X: np.ndarray):
    """Vectorized projection: returns (pixels (n,2), valid mask (n,))."""
    xc = pose.apply(np.asarray(X, dtype=float).reshape(-1, 3))
    valid = xc[:, 2] > _MIN_DEPTH
    z = np.where(valid, xc[:, 2], 1.0)
    px = np.stack(
        [cam.fx * xc[:, 0] / z + cam.cx, cam.fy * xc[:, 1] / z + cam.cy], axis=1
    )
    return px, valid


def backproject(cam: Camera, pose: Pose, px: np.ndarray, depth_m: float) -> np.ndarray:
    """World point whose camera-frame depth is depth_m and projection is px."""
    if depth_m <= 0:
        raise NonPositiveDepth(f"depth must be > 0, got {depth_m}")
    u, v = float(px[0]), float(px[1])
    xc = np.array(
        [(u - cam.cx) / cam.fx * depth_m, (v - cam.cy) / cam.fy * depth_m, depth_m]
    )
    return pose.R.T @ (xc - pose.t)


# --- triangulation ---

_DEGENERACY_SV_RATIO = 0.99
_GN_MAX_ITERS = 10
_GN_STEP_TOL = 1e-10


def _reproj_residuals(obs, X):
    res = np.empty(len(obs))
    for i, (cam, pose, px) in enumerate(obs):
        proj = project(cam, pose, X)
        if proj is None:
            res[i] = np.inf
        else:
            res[i] = float(np.hypot(proj[0] - px[0], proj[1] - px[1]))
    return res


def triangulate(obs: Sequence) -> tuple:
    """Triangulate a world point from >= 2 observations (Camera, Pose, pixel).

    DLT initialization refined by Gauss-Newton on the total squared
    reprojection error. Returns (point (3,), per-view pixel residuals).
    """
    if len(obs) < 2:
        raise ValueError("triangulate needs at least 2 observations")
    rows = []
    for cam, pose, px in obs:
        P = cam.K() @ pose.matrix()[:3, :]
        u, v = float(px[0]), float(px[1])
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    A = np.asarray(rows)
    norms = np.linalg.norm(A, axis=1)
    norms[norms == 0] = 1.0
    A = A / norms[:, None]
    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-12 * s[0]:
        raise DegenerateGeometry("rank-deficient DLT system (zero baseline)")
    if s[-1] > _DEGENERACY_SV_RATIO * s[-2]:
        raise DegenerateGeometry(
            f"near-parallel rays: singular value ratio {s[-1] / s[-2]:.4f}"
        )
    Xh = vt[-1]
    if abs(Xh[3]) < 1e-15:
        raise DegenerateGeometry("point at infinity in DLT solution")
    X = Xh[:3] / Xh[3]

    # Gauss-Newton on the 3D point
    def total_err(P):
        r = _reproj_residuals(obs, P)
        return np.inf if np.any(np.isinf(r)) else float(np.sum(r * r))

    best = X.copy()
    best_err = total_err(best)
    for _ in range(_GN_MAX_ITERS):
        J = np.zeros((2 * len(obs), 3))
        r = np.zeros(2 * len(obs))
        ok = True
        for i, (cam, pose, px) in enumerate(obs):
            xc = pose.apply(best)
            if xc[2] <= _MIN_DEPTH:
                ok = False
                break
            x, y, z = xc
            proj = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
            r[2 * i : 2 * i + 2] = proj - np.asarray(px, dtype=float)
            d_pix = np.array(
                [[cam.fx / z, 0.0, -cam.fx * x / z**2], [0.0, cam.fy / z, -cam.fy * y / z**2]]
            )
            J[2 * i : 2 * i + 2] = d_pix @ pose.R
        if not ok:
            break
        try:
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        cand = best + step
        cand_err = total_err(cand)
        if cand_err < best_err:
            best, best_err = cand, cand_err
        if np.linalg.norm(step) < _GN_STEP_TOL:
            break
    return best, _reproj_residuals(obs, best)


# --- epipolar geometry ---

def fundamental_matrix(camA: Camera, poseA: Pose, camB: Camera, poseB: Pose):
    """F such that pB~^T F pA~ = 0, or None for zero baseline (no constraint)."""
    rel = compose(poseB, inverse(poseA))  # x_B = R x_A + t
    t = rel.t
    if np.linalg.norm(t) < 1e-12:
        return None
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    E = tx @ rel.R
    return np.linalg.inv(camB.K()).T @ E @ np.linalg.inv(camA.K())


def epipolar_distance(
    camA: Camera,
    poseA: Pose,
    pA: np.ndarray,
    camB: Camera,
    poseB: Pose,
    pB: np.ndarray,
) -> float:
    """Symmetric epipolar distance in pixels: mean of the two point-to-line
    distances. +inf when the pair imposes no constraint (zero baseline)."""
    F = fundamental_matrix(camA, poseA, camB, poseB)
    if F is None:
        return math.inf
    pa = np.array([pA[0], pA[1], 1.0])
    pb = np.array([pB[0], pB[1], 1.0])
    lB = F @ pa
    lA = F.T @ pb
    dists = []
    nB = math.hypot(lB[0], lB[1])
    if nB > 1e-15:
        dists.append(abs(float(pb @ lB)) / nB)
    nA = math.hypot(lA[0], lA[1])
    if nA > 1e-15:
        dists.append(abs(float(pa @ lA)) / nA)
    if not dists:
        return math.inf
    return float(sum(dists) / len(dists))


def epipolar_distances(
    camA: Camera,
    poseA: Pose,
    ptsA: np.ndarray,
    camB: Camera,
    poseB: Pose,
    ptsB: np.ndarray,
) -> np.ndarray:
    """Vectorized symmetric epipolar distance for aligned point rows."""
    ptsA = np.asarray(ptsA, dtype=float).reshape(-1, 2)
    ptsB = np.asarray(ptsB, dtype=float).reshape(-1, 2)
    n = len(ptsA)
    F = fundamental_matrix(camA, poseA, camB, poseB)
    if F is None:
        return np.full(n, np.inf)
    pa = np.column_stack([ptsA, np.ones(n)])
    pb = np.column_stack([ptsB, np.ones(n)])
    lB = pa @ F.T  # rows: F @ pa_i
    lA = pb @ F  # rows: F.T @ pb_i
    e = np.abs(np.sum(pb * lB, axis=1))
    nB = np.hypot(lB[:, 0], lB[:, 1])
    nA = np.hypot(lA[:, 0], lA[:, 1])
    out = np.full(n, np.inf)
    both = (nB > 1e-15) & (nA > 1e-15)
    out[both] = 0.5 * (e[both] / nB[both] + e[both] / nA[both])
    onlyB = (nB > 1e-15) & ~both
    out[onlyB] = e[onlyB] / nB[onlyB]
    onlyA = (nA > 1e-15) & ~both
    out[onlyA] = e[onlyA] / nA[onlyA]
    return out
