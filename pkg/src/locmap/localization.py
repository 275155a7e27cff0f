"""6DOF query localization: 2D-3D correspondence assembly, three-point
resection inside RANSAC, and Levenberg-Marquardt pose refinement."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datastore import Dataset, ReconstructedMap, fmt_real, read_csv, write_csv
from .errors import CollinearPoints, MalformedCsv, NoRealSolution
from .fusion import FusionParams, fuse_scores, normalize_scores
from .geometry import Camera, Pose, project_many, quat_from_rotmat, rotmat
from .mapping import image_camera
from .matching import MatchParams, match_descriptors
from .pairing import RetrievalParams


@dataclass(frozen=True)
class Correspondence2D3D:
    """One pixel measurement paired with one map point: the PnP input unit."""

    pixel: np.ndarray  # (2,)
    point_id: int
    xyz: np.ndarray  # (3,)


@dataclass
class PnPConfig:
    max_error_px: float = 12.0
    min_num_inliers: int = 30
    min_inlier_ratio: float = 0.25
    confidence: float = 0.9999
    max_iterations: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.max_error_px <= 0 or self.min_num_inliers <= 0:
            raise ValueError("thresholds must be positive")
        if not 0.0 < self.min_inlier_ratio <= 1.0:
            raise ValueError("min_inlier_ratio must be in (0, 1]")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must be in (0, 1)")

    @staticmethod
    def config1(seed: int = 0) -> "PnPConfig":
        return PnPConfig(max_error_px=12.0, min_num_inliers=30, min_inlier_ratio=0.25, seed=seed)

    @staticmethod
    def config2(seed: int = 0) -> "PnPConfig":
        return PnPConfig(max_error_px=20.0, min_num_inliers=4, min_inlier_ratio=0.05, seed=seed)


class Provenance(Enum):
    DIRECT = "direct"
    RIG = "rig"
    SEQUENCE_INTERP = "sequence_interp"
    SEQUENCE_NN = "sequence_nn"


@dataclass
class LocalizationResult:
    image_path: str
    pose: Optional[Pose]
    num_inliers: int = 0
    num_correspondences: int = 0
    provenance: Provenance = Provenance.DIRECT


def assemble_2d3d(
    query_kpts: np.ndarray,
    matches_by_db_image: Dict[str, np.ndarray],
    rec_map: ReconstructedMap,
) -> List[Correspondence2D3D]:
    """Lift query->database matches to 2D-3D correspondences through the map
    observations. The same (query keypoint, point) pair reached via several
    retrieved images collapses to one correspondence."""
    obs_index = rec_map.observations_by_image()
    found = {}
    for db_img in sorted(matches_by_db_image):
        kp_to_pid = obs_index.get(db_img)
        if not kp_to_pid:
            continue
        for qi, di, _ in np.asarray(matches_by_db_image[db_img]).reshape(-1, 3):
            pid = kp_to_pid.get(int(di))
            if pid is None:
                continue
            found.setdefault((int(qi), pid), None)
    out = []
    for qi, pid in sorted(found):
        out.append(
            Correspondence2D3D(
                pixel=np.asarray(query_kpts[qi, :2], dtype=float),
                point_id=pid,
                xyz=np.asarray(rec_map.points[pid].xyz, dtype=float),
            )
        )
    return out


# --- P3P (Grunert's three-point resection) ---

_P3P_REPROJ_TOL = 1e-6


def _bearings(cam: Camera, pixels: np.ndarray) -> np.ndarray:
    m = np.column_stack(
        [
            (pixels[:, 0] - cam.cx) / cam.fx,
            (pixels[:, 1] - cam.cy) / cam.fy,
            np.ones(len(pixels)),
        ]
    )
    return m / np.linalg.norm(m, axis=1)[:, None]


def _grunert_quartic(a2, b2, c2, ca, cb, cg):
    """Quartic in v = s3/s1 obtained by eliminating u = s2/s1 from the three
    law-of-cosine constraints (resultant, common factor b2^2 removed)."""
    A4 = a2**2 - 2 * a2 * b2 - 2 * a2 * c2 + b2**2 - 4 * b2 * c2 * ca**2 + 2 * b2 * c2 + c2**2
    A3 = (
        -4 * a2**2 * cb
        + 4 * a2 * b2 * ca * cg
        + 4 * a2 * b2 * cb
        + 8 * a2 * c2 * cb
        - 4 * b2**2 * ca * cg
        + 8 * b2 * c2 * ca**2 * cb
        + 4 * b2 * c2 * ca * cg
        - 4 * b2 * c2 * cb
        - 4 * c2**2 * cb
    )
    A2 = (
        4 * a2**2 * cb**2
        + 2 * a2**2
        - 8 * a2 * b2 * ca * cb * cg
        - 4 * a2 * b2 * cg**2
        - 8 * a2 * c2 * cb**2
        - 4 * a2 * c2
        + 4 * b2**2 * ca**2
        + 4 * b2**2 * cg**2
        - 2 * b2**2
        - 4 * b2 * c2 * ca**2
        - 8 * b2 * c2 * ca * cb * cg
        + 4 * c2**2 * cb**2
        + 2 * c2**2
    )
    A1 = (
        -4 * a2**2 * cb
        + 4 * a2 * b2 * ca * cg
        + 8 * a2 * b2 * cb * cg**2
        - 4 * a2 * b2 * cb
        + 8 * a2 * c2 * cb
        - 4 * b2**2 * ca * cg
        + 4 * b2 * c2 * ca * cg
        + 4 * b2 * c2 * cb
        - 4 * c2**2 * cb
    )
    A0 = a2**2 - 4 * a2 * b2 * cg**2 + 2 * a2 * b2 - 2 * a2 * c2 + b2**2 - 2 * b2 * c2 + c2**2
    return np.array([A4, A3, A2, A1, A0])


def _u_from_v(v, a2, b2, c2, ca, cb, cg):
    den = 2.0 * b2 * (ca * v - cg)
    num = 2 * a2 * cb * v - a2 * v**2 - a2 + b2 * v**2 - b2 - 2 * c2 * cb * v + c2 * v**2 + c2
    if abs(den) < 1e-12 * max(1.0, abs(num)):
        return None
    return num / den


def _polish_uv(u, v, a2, b2, c2, ca, cb, cg):
    """Newton iterations on the two law-of-cosine constraints; the quartic
    coefficients carry rounding error, so roots are sharpened on the original
    system."""
    for _ in range(5):
        Q = 1.0 + v * v - 2.0 * v * cb
        f1 = a2 * Q - b2 * (u * u + v * v - 2.0 * u * v * ca)
        f2 = c2 * Q - b2 * (1.0 + u * u - 2.0 * u * cg)
        j11 = -b2 * (2.0 * u - 2.0 * v * ca)  # df1/du
        j12 = a2 * (2.0 * v - 2.0 * cb) - b2 * (2.0 * v - 2.0 * u * ca)  # df1/dv
        j21 = -b2 * (2.0 * u - 2.0 * cg)  # df2/du
        j22 = c2 * (2.0 * v - 2.0 * cb)  # df2/dv
        det = j11 * j22 - j12 * j21
        if abs(det) < 1e-300:
            break
        du = -(j22 * f1 - j12 * f2) / det
        dv = -(-j21 * f1 + j11 * f2) / det
        u += du
        v += dv
        if abs(du) + abs(dv) < 1e-15 * (abs(u) + abs(v) + 1.0):
            break
    return u, v


def _kabsch_world_to_cam(X: np.ndarray, Y: np.ndarray) -> Pose:
    """Rigid transform with Y_i = R @ X_i + t (least squares, det(R) = +1)."""
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    H = Xc.T @ Yc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = Y.mean(axis=0) - R @ X.mean(axis=0)
    return Pose(quat_from_rotmat(R), t)


def solve_p3p(corrs: Sequence[Correspondence2D3D], cam: Camera) -> List[Pose]:
    """Closed-form three-point resection; up to 4 candidate poses, each
    reprojecting all three points within 1e-6 px."""
    if len(corrs) != 3:
        raise ValueError("solve_p3p needs exactly 3 correspondences")
    X = np.stack([c.xyz for c in corrs])
    px = np.stack([c.pixel for c in corrs])
    d12 = X[1] - X[0]
    d13 = X[2] - X[0]
    cross = np.cross(d12, d13)
    n12, n13 = np.linalg.norm(d12), np.linalg.norm(d13)
    if n12 < 1e-12 or n13 < 1e-12 or np.linalg.norm(cross) < 1e-9 * n12 * n13:
        raise CollinearPoints("3D points are (near-)collinear")

    m = _bearings(cam, px)
    ca = float(m[1] @ m[2])
    cb = float(m[0] @ m[2])
    cg = float(m[0] @ m[1])
    a2 = float(np.sum((X[1] - X[2]) ** 2))
    b2 = float(np.sum((X[0] - X[2]) ** 2))
    c2 = float(np.sum((X[0] - X[1]) ** 2))

    coeffs = _grunert_quartic(a2, b2, c2, ca, cb, cg)
    scale = np.max(np.abs(coeffs))
    if scale < 1e-300:
        raise NoRealSolution("degenerate quartic")
    roots = np.roots(coeffs / scale)

    candidates: List[Pose] = []
    for v in roots:
        # near-real roots are kept and pulled onto the real solution by the
        # Newton polish; spurious ones fail the reprojection gate
        if abs(v.imag) > 1e-4 * (1.0 + abs(v.real)):
            continue
        v = float(v.real)
        if v <= 0:
            continue
        u = _u_from_v(v, a2, b2, c2, ca, cb, cg)
        if u is None:
            continue
        u, v = _polish_uv(u, v, a2, b2, c2, ca, cb, cg)
        if u <= 0 or v <= 0:
            continue
        q = 1.0 + v * v - 2.0 * v * cb
        if q <= 1e-300:
            continue
        s1 = math.sqrt(b2 / q)
        s = np.array([s1, u * s1, v * s1])
        Y = m * s[:, None]  # camera-frame points along the bearing rays
        pose = _kabsch_world_to_cam(X, Y)
        # final polish on the pose itself: the ray-length parameterization is
        # ill-conditioned for narrow-angle triples
        pose = _lm_refine(pose, X, px, cam, max_iters=3)
        proj, valid = project_many(cam, pose, X)
        if not np.all(valid):
            continue
        if float(np.max(np.linalg.norm(proj - px, axis=1))) <= _P3P_REPROJ_TOL:
            candidates.append(pose)
    if not candidates:
        raise NoRealSolution("no valid real root of the resection quartic")
    return candidates[:4]


# --- pose refinement ---

_LM_MAX_ITERS = 50


def _reproj_errors(pose: Pose, corrs, cam: Camera) -> np.ndarray:
    X = np.stack([c.xyz for c in corrs])
    px = np.stack([c.pixel for c in corrs])
    proj, valid = project_many(cam, pose, X)
    err = np.linalg.norm(proj - px, axis=1)
    err[~valid] = np.inf
    return err


def refine_pose(initial: Pose, inliers: Sequence[Correspondence2D3D], cam: Camera) -> Pose:
    """Levenberg-Marquardt on total squared reprojection error over a local
    6-parameter increment (delta rotation, delta translation) applied on the
    left. Never returns a pose with higher total error than the input."""
    if len(inliers) < 4:
        return initial
    X = np.stack([c.xyz for c in inliers])
    px = np.stack([c.pixel for c in inliers])
    return _lm_refine(initial, X, px, cam)


def _lm_refine(
    initial: Pose, X: np.ndarray, px: np.ndarray, cam: Camera, max_iters: int = _LM_MAX_ITERS
) -> Pose:

    def residuals(pose: Pose):
        xc = pose.apply(X)
        if np.any(xc[:, 2] <= 1e-9):
            return None, None
        z = xc[:, 2]
        proj = np.column_stack([cam.fx * xc[:, 0] / z + cam.cx, cam.fy * xc[:, 1] / z + cam.cy])
        return (proj - px).ravel(), xc

    def total(r):
        return float(r @ r)

    best = initial
    r, xc = residuals(best)
    if r is None:
        return initial
    best_err = total(r)
    lam = 1e-3
    for _ in range(max_iters):
        n = len(X)
        J = np.zeros((2 * n, 6))
        z = xc[:, 2]
        # d(pixel)/d(camera point)
        dpix = np.zeros((n, 2, 3))
        dpix[:, 0, 0] = cam.fx / z
        dpix[:, 0, 2] = -cam.fx * xc[:, 0] / z**2
        dpix[:, 1, 1] = cam.fy / z
        dpix[:, 1, 2] = -cam.fy * xc[:, 1] / z**2
        # d(camera point)/d(dt) = I ; d/d(omega) = -[xc]x for a left increment
        for i in range(n):
            sk = np.array(
                [
                    [0, -xc[i, 2], xc[i, 1]],
                    [xc[i, 2], 0, -xc[i, 0]],
                    [-xc[i, 1], xc[i, 0], 0],
                ]
            )
            J[2 * i : 2 * i + 2, :3] = dpix[i]
            J[2 * i : 2 * i + 2, 3:] = -dpix[i] @ sk
        JtJ = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(8):
            try:
                step = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ)) + 1e-15 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dt, omega = step[:3], step[3:]
            angle = float(np.linalg.norm(omega))
            if angle < 1e-16:
                dR = np.eye(3)
            else:
                k = omega / angle
                K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
                dR = np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)
            cand = Pose(quat_from_rotmat(dR @ rotmat(best.q)), dR @ best.t + dt)
            rc, xcc = residuals(cand)
            if rc is not None and total(rc) < best_err:
                best, best_err, r, xc = cand, total(rc), rc, xcc
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved:
            break
        if np.linalg.norm(step) < 1e-14:
            break
    return best


# --- RANSAC ---

def ransac_pnp(
    corrs: Sequence[Correspondence2D3D], cam: Camera, cfg: PnPConfig
) -> Optional[Tuple[Pose, np.ndarray]]:
    """Seeded RANSAC over minimal three-point samples. The candidate with the
    most inliers wins (ties by lower mean inlier error), is refined on its
    inliers, and must pass the min_num_inliers / min_inlier_ratio gates.
    Returns (pose, inlier indices) or None; absence of a pose is a value,
    not an error."""
    n = len(corrs)
    if n < 3:
        return None
    rng = np.random.default_rng(cfg.seed)
    best_pose = None
    best_count = 0
    best_mean_err = np.inf
    max_iters = cfg.max_iterations
    it = 0
    while it < max_iters:
        it += 1
        sample = rng.choice(n, size=3, replace=False)
        try:
            cands = solve_p3p([corrs[i] for i in sample], cam)
        except (CollinearPoints, NoRealSolution):
            continue
        for pose in cands:
            err = _reproj_errors(pose, corrs, cam)
            inl = err <= cfg.max_error_px
            count = int(np.count_nonzero(inl))
            if count == 0:
                continue
            mean_err = float(np.mean(err[inl]))
            if count > best_count or (count == best_count and mean_err < best_mean_err):
                best_pose = pose
                best_count = count
                best_mean_err = mean_err
                w = count / n
                if w >= 1.0:
                    max_iters = min(max_iters, it)
                else:
                    denom = math.log1p(-(w**3))
                    if denom < 0:
                        need = math.ceil(math.log1p(-cfg.confidence) / denom)
                        max_iters = min(max_iters, max(it, need))
    if best_pose is None:
        return None
    inl_idx = np.flatnonzero(_reproj_errors(best_pose, corrs, cam) <= cfg.max_error_px)
    refined = refine_pose(best_pose, [corrs[i] for i in inl_idx], cam)
    final_idx = np.flatnonzero(_reproj_errors(refined, corrs, cam) <= cfg.max_error_px)
    if len(final_idx) < len(inl_idx):
        refined, final_idx = best_pose, inl_idx  # refinement must not lose consensus
    if len(final_idx) < cfg.min_num_inliers or len(final_idx) / n < cfg.min_inlier_ratio:
        return None
    return refined, final_idx


def query_seed(global_seed: int, image_path: str) -> int:
    """Stable per-query RANSAC seed (independent of process hash salting)."""
    digest = hashlib.blake2s(image_path.encode("utf-8"), digest_size=8).digest()
    return (global_seed ^ int.from_bytes(digest, "little")) & 0x7FFFFFFFFFFFFFFF


def localize_query(
    ds: Dataset,
    rec_map: ReconstructedMap,
    query_image: str,
    retrieval: RetrievalParams = RetrievalParams(),
    match: MatchParams = MatchParams(),
    pnp: PnPConfig = PnPConfig(),
    fusion: Optional[FusionParams] = None,
    pairs: Optional[Sequence[Tuple[str, str, float]]] = None,
) -> LocalizationResult:
    """Full single-query pipeline: top-k retrieval against the mapped images
    (or a precomputed, possibly fused, pair list), per-image descriptor
    matching, 2D-3D assembly, and RANSAC PnP. Provenance is DIRECT."""
    if pairs is not None:
        retrieved = [b for a, b, _ in pairs if a == query_image][: retrieval.k]
    else:
        db_images = sorted(
            img for img in rec_map.observations_by_image() if img in ds.features.global_features
        )
        if query_image not in ds.features.global_features or not db_images:
            return LocalizationResult(query_image, None)
        q = ds.features.global_features[query_image]
        db = {img: ds.features.global_features[img] for img in db_images}
        sims = _retrieval_scores(q, db)
        if fusion is not None:
            fused = fuse_scores(fusion, normalize_scores([[s for _, s in sims]]))
            sims = [(img, float(f)) for (img, _), f in zip(sims, fused)]
        sims.sort(key=lambda p: (-p[1], p[0]))
        retrieved = [img for img, _ in sims[: retrieval.k]]

    matches_by_db = {}
    qdesc = ds.features.descriptors.get(query_image)
    if qdesc is None:
        return LocalizationResult(query_image, None)
    for db_img in retrieved:
        ddesc = ds.features.descriptors.get(db_img)
        if ddesc is None:
            continue
        m = match_descriptors(qdesc, ddesc, match)
        if len(m):
            matches_by_db[db_img] = m
    corrs = assemble_2d3d(ds.features.keypoints[query_image], matches_by_db, rec_map)
    result = LocalizationResult(query_image, None, 0, len(corrs))
    if not corrs:
        return result
    cam = image_camera(ds, query_image)
    cfg = PnPConfig(
        max_error_px=pnp.max_error_px,
        min_num_inliers=pnp.min_num_inliers,
        min_inlier_ratio=pnp.min_inlier_ratio,
        confidence=pnp.confidence,
        max_iterations=pnp.max_iterations,
        seed=query_seed(pnp.seed, query_image),
    )
    solved = ransac_pnp(corrs, cam, cfg)
    if solved is None:
        return result
    pose, inl = solved
    result.pose = pose
    result.num_inliers = int(len(inl))
    return result


def _retrieval_scores(q: np.ndarray, db: Dict[str, np.ndarray]) -> List[Tuple[str, float]]:
    qv = np.asarray(q, dtype=float).reshape(-1)
    nq = np.linalg.norm(qv)
    if nq > 0:
        qv = qv / nq
    out = []
    for img in sorted(db):
        d = np.asarray(db[img], dtype=float).reshape(-1)
        nd = np.linalg.norm(d)
        if nd > 0:
            d = d / nd
        out.append((img, float(qv @ d)))
    return out


# --- results file ---

def save_results(path, results: Sequence[LocalizationResult]) -> None:
    rows = []
    for r in results:
        if r.pose is not None:
            pose_fields = [fmt_real(v) for v in (*r.pose.q, *r.pose.t)]
        else:
            pose_fields = [""] * 7
        rows.append(
            [r.image_path, *pose_fields, r.num_inliers, r.num_correspondences, r.provenance.value]
        )
    write_csv(Path(path), "results", rows)


def load_results(path) -> List[LocalizationResult]:
    out = []
    for line_no, f in read_csv(Path(path)):
        if len(f) != 11:
            raise MalformedCsv(path, line_no, "expected 11 fields")
        pose = None
        if any(f[1:8]):
            pose = Pose(np.array([float(v) for v in f[1:5]]), np.array([float(v) for v in f[5:8]]))
        out.append(
            LocalizationResult(
                image_path=f[0],
                pose=pose,
                num_inliers=int(f[8]),
                num_correspondences=int(f[9]),
                provenance=Provenance(f[10]),
            )
        )
    return out
