"""Deterministic synthetic-scene generator: ground truth for end-to-end tests.

Points are uniform in a box; cameras sit on a ring looking inward. Keypoints
are true projections plus clipped Gaussian noise, local descriptors are
point-anchored random vectors with small per-view noise (matching is solvable
but nontrivial), and global descriptors are random projections of the
visible-point indicator vector, so images seeing the same region retrieve
each other. Depth maps, when rendered, splat true camera-frame z at the
nearest pixel with near-wins occlusion.

All randomness comes from numpy SeedSequence streams keyed by
(seed, entity kind, entity index), so adding cameras never perturbs points
and vice versa.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .datastore import (
    Dataset,
    FeatureStore,
    Rig,
    fmt_real,
    read_csv,
    save_dataset,
    save_depth_map,
    write_csv,
)
from .geometry import Camera, CameraModel, Pose, compose, quat_from_rotmat, rotmat

_KIND = {
    "points": 0,
    "point_desc": 1,
    "map_cam": 2,
    "query_cam": 3,
    "kp_noise": 4,
    "view_desc": 5,
    "outliers": 6,
    "global_proj": 7,
    "pose_noise": 8,
}


def _rng(seed: int, kind: str, idx: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _KIND[kind], idx]))


@dataclass
class SynthConfig:
    seed: int = 0
    n_points: int = 500
    n_map_cams: int = 12
    n_query_cams: int = 4
    scene_extent_m: float = 10.0
    pixel_noise_sigma: float = 0.0
    descriptor_dim_local: int = 64
    descriptor_dim_global: int = 32
    outlier_fraction: float = 0.0
    rig_spec: Optional[Tuple[int, float]] = None  # (n_cams, baseline between neighbors, m)
    depth_render: bool = False
    pose_noise: Optional[Tuple[float, float]] = None  # (sigma_t m, sigma_r deg) on stored poses
    descriptor_noise: float = 0.02
    image_width: int = 640
    image_height: int = 480
    focal_px: float = 600.0
    ring_radius_m: Optional[float] = None  # default 0.9 * scene_extent_m
    ring_arc_deg: float = 360.0  # map cameras span this arc (small = video-like)

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must be in [0, 1]")
        if self.n_points < 0 or self.n_map_cams < 0 or self.n_query_cams < 0:
            raise ValueError("counts must be non-negative")


@dataclass
class GroundTruth:
    poses: Dict[str, Pose] = field(default_factory=dict)  # true pose per image
    points: Dict[int, np.ndarray] = field(default_factory=dict)
    correspondences: Dict[str, Dict[int, int]] = field(default_factory=dict)  # img -> kp -> pid
    depth_maps: Dict[str, np.ndarray] = field(default_factory=dict)  # depth_path -> (h, w)


def _look_at(center: np.ndarray, target: np.ndarray) -> Pose:
    """World-to-camera pose for a camera at center looking toward target,
    z-up hint."""
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    if abs(float(z @ up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(quat_from_rotmat(R), -(R @ center))


def _perturbed(pose: Pose, sigma_t: float, sigma_r_deg: float, rng) -> Pose:
    c = pose.center() + rng.normal(0.0, sigma_t, 3)
    angle = math.radians(rng.normal(0.0, sigma_r_deg))
    axis = rng.normal(size=3)
    axis = axis / np.linalg.norm(axis)
    K = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    dR = np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)
    R = dR @ rotmat(pose.q)
    return Pose(quat_from_rotmat(R), -(R @ c))


def generate_scene(cfg: SynthConfig) -> Tuple[Dataset, GroundTruth]:
    gt = GroundTruth()
    ds = Dataset()
    fs = FeatureStore(
        keypoints_type="synth",
        descriptors_type="synth",
        global_features_type="synth",
        matches_type="synth",
    )
    ds.features = fs

    e = cfg.scene_extent_m
    radius = cfg.ring_radius_m if cfg.ring_radius_m is not None else 0.9 * e
    pts = _rng(cfg.seed, "points").uniform(-e / 2, e / 2, size=(cfg.n_points, 3))
    for pid in range(cfg.n_points):
        gt.points[pid] = pts[pid]
    base_desc = _rng(cfg.seed, "point_desc").normal(
        size=(cfg.n_points, cfg.descriptor_dim_local)
    )
    if cfg.n_points:
        base_desc /= np.linalg.norm(base_desc, axis=1)[:, None]
    gproj = _rng(cfg.seed, "global_proj").normal(
        size=(cfg.descriptor_dim_global, max(cfg.n_points, 1))
    )

    cam_params = (cfg.focal_px, cfg.focal_px, cfg.image_width / 2, cfg.image_height / 2)

    def ring_pose(angle: float, rng, height_scale: float = 1.0) -> Pose:
        center = np.array(
            [
                radius * math.cos(angle),
                radius * math.sin(angle),
                rng.uniform(-0.15 * e, 0.15 * e) * height_scale,
            ]
        )
        target = rng.uniform(-0.05 * e, 0.05 * e, 3)
        return _look_at(center, target)

    # map cameras: one image each at timestamp = index; on a full ring by
    # default, or clustered on a short arc (video-like capture)
    images: List[Tuple[str, str, int, Pose]] = []  # (image_path, sensor_id, ts, true pose)
    arc = math.radians(cfg.ring_arc_deg)
    arc_frac = min(cfg.ring_arc_deg / 360.0, 1.0)
    for i in range(cfg.n_map_cams):
        rng = _rng(cfg.seed, "map_cam", i)
        angle = arc * i / max(cfg.n_map_cams, 1) + rng.uniform(-0.05, 0.05) * arc_frac
        pose = ring_pose(angle, rng, height_scale=arc_frac)
        sid = f"map_{i:03d}"
        img = f"map/{i:04d}.png"
        ds.cameras[sid] = Camera(sid, CameraModel.PINHOLE, cfg.image_width, cfg.image_height, cam_params)
        ds.image_records[(i, sid)] = img
        images.append((img, sid, i, pose))
        stored = pose
        if cfg.pose_noise is not None:
            stored = _perturbed(pose, cfg.pose_noise[0], cfg.pose_noise[1], _rng(cfg.seed, "pose_noise", i))
        ds.trajectories.set(i, sid, stored)

    # query cameras: single sensors or one rig capturing all members per frame
    query_base_ts = 1000000
    if cfg.rig_spec is None:
        for j in range(cfg.n_query_cams):
            rng = _rng(cfg.seed, "query_cam", j)
            angle = 2 * math.pi * (j + 0.37) / max(cfg.n_query_cams, 1) + rng.uniform(-0.05, 0.05)
            pose = ring_pose(angle, rng)
            sid = f"query_{j:03d}"
            img = f"query/{j:04d}.png"
            ds.cameras[sid] = Camera(
                sid, CameraModel.PINHOLE, cfg.image_width, cfg.image_height, cam_params
            )
            ds.image_records[(query_base_ts + 10 * j, sid)] = img
            images.append((img, sid, query_base_ts + 10 * j, pose))
    else:
        n_rig_cams, baseline = cfg.rig_spec
        rig = Rig("rig0")
        for m in range(n_rig_cams):
            sid = f"rig0_cam{m}"
            ds.cameras[sid] = Camera(
                sid, CameraModel.PINHOLE, cfg.image_width, cfg.image_height, cam_params
            )
            # members offset along the rig x axis
            offset = (m - (n_rig_cams - 1) / 2.0) * baseline
            rig.members[sid] = Pose(np.array([1.0, 0, 0, 0]), np.array([offset, 0.0, 0.0]))
        ds.rigs[rig.rig_id] = rig
        for j in range(cfg.n_query_cams):
            rng = _rng(cfg.seed, "query_cam", j)
            angle = 2 * math.pi * (j + 0.37) / max(cfg.n_query_cams, 1) + rng.uniform(-0.05, 0.05)
            rig_pose = ring_pose(angle, rng)
            ts = query_base_ts + 10 * j
            for m in range(n_rig_cams):
                sid = f"rig0_cam{m}"
                img = f"query/{j:04d}_cam{m}.png"
                ds.image_records[(ts, sid)] = img
                images.append((img, sid, ts, compose(rig.members[sid], rig_pose)))

    w, h = cfg.image_width, cfg.image_height
    near = 0.1
    for img, sid, ts, pose in sorted(images):
        gt.poses[img] = pose
        if cfg.n_points == 0:
            continue
        cam = ds.cameras[sid]
        xc = pose.apply(pts)
        z = xc[:, 2]
        front = z > near
        zs = np.where(front, z, 1.0)
        u = cam.fx * xc[:, 0] / zs + cam.cx
        v = cam.fy * xc[:, 1] / zs + cam.cy
        ru = np.round(u).astype(int)
        rv = np.round(v).astype(int)
        visible = front & (ru >= 0) & (ru < w) & (rv >= 0) & (rv < h)

        depth = None
        if cfg.depth_render:
            # nearest point wins a pixel; losers are treated as occluded
            depth = np.zeros((h, w), dtype=np.float32)
            owner = np.full((h, w), -1, dtype=int)
            for pid in np.flatnonzero(visible):
                zi = float(z[pid])
                cur = depth[rv[pid], ru[pid]]
                if cur == 0.0 or zi < cur:
                    if owner[rv[pid], ru[pid]] >= 0:
                        visible[owner[rv[pid], ru[pid]]] = False
                    depth[rv[pid], ru[pid]] = np.float32(zi)
                    owner[rv[pid], ru[pid]] = pid
                else:
                    visible[pid] = False
            dpath = f"depth/{img.replace('/', '_')}.depth"
            key = (ts, sid)
            ds.depth_records[key] = dpath
            gt.depth_maps[dpath] = depth

        vis_ids = np.flatnonzero(visible)
        kps = np.column_stack([u[vis_ids], v[vis_ids]])
        if cfg.pixel_noise_sigma > 0 and len(vis_ids):
            noise = _rng(cfg.seed, "kp_noise", _stable_idx(img)).normal(
                0.0, cfg.pixel_noise_sigma, size=kps.shape
            )
            norms = np.linalg.norm(noise, axis=1)
            cap = 4.99 * cfg.pixel_noise_sigma
            big = norms > cap
            noise[big] *= (cap / norms[big])[:, None]
            kps = kps + noise
        desc = base_desc[vis_ids].copy()
        if cfg.descriptor_noise > 0 and len(vis_ids):
            desc += cfg.descriptor_noise * _rng(cfg.seed, "view_desc", _stable_idx(img)).normal(
                size=desc.shape
            )
            desc /= np.linalg.norm(desc, axis=1)[:, None]

        n_out = int(round(cfg.outlier_fraction * len(vis_ids)))
        if n_out:
            orng = _rng(cfg.seed, "outliers", _stable_idx(img))
            out_kps = np.column_stack(
                [orng.uniform(0, w, n_out), orng.uniform(0, h, n_out)]
            )
            out_desc = orng.normal(size=(n_out, cfg.descriptor_dim_local))
            out_desc /= np.linalg.norm(out_desc, axis=1)[:, None]
            kps = np.vstack([kps, out_kps])
            desc = np.vstack([desc, out_desc])

        fs.keypoints[img] = kps.astype(np.float32)
        fs.descriptors[img] = desc.astype(np.float32)
        hist = np.zeros(max(cfg.n_points, 1))
        hist[vis_ids] = 1.0
        g = gproj @ hist
        norm = np.linalg.norm(g)
        if norm > 0:
            g = g / norm
        fs.global_features[img] = g.astype(np.float32)
        gt.correspondences[img] = {int(k): int(pid) for k, pid in enumerate(vis_ids)}

    ds.validate()
    return ds, gt


def _stable_idx(image_path: str) -> int:
    """Stable small integer per image path for stream keying."""
    acc = 0
    for ch in image_path.encode("utf-8"):
        acc = (acc * 131 + ch) % (2**31 - 1)
    return acc


# --- on-disk scene ---

def write_scene(ds: Dataset, gt: GroundTruth, root) -> None:
    """Save the dataset plus the ground_truth/ sidecar, depth payloads, and
    zero-byte image placeholders."""
    root = Path(root)
    save_dataset(ds, root)
    for key, dpath in sorted(ds.depth_records.items()):
        if dpath in gt.depth_maps:
            save_depth_map(root / dpath, gt.depth_maps[dpath])
    for key, img in sorted(ds.image_records.items()):
        p = root / "images" / img
        p.parent.mkdir(parents=True, exist_ok=True)
        p.touch()
    gdir = root / "ground_truth"
    write_csv(
        gdir / "poses.txt",
        "gt_poses",
        [
            [img] + [fmt_real(x) for x in (*gt.poses[img].q, *gt.poses[img].t)]
            for img in sorted(gt.poses)
        ],
    )
    write_csv(
        gdir / "points3d.txt",
        "gt_points3d",
        [[pid] + [fmt_real(x) for x in gt.points[pid]] for pid in sorted(gt.points)],
    )
    rows = []
    for img in sorted(gt.correspondences):
        for kp in sorted(gt.correspondences[img]):
            rows.append([img, kp, gt.correspondences[img][kp]])
    write_csv(gdir / "correspondences.txt", "gt_correspondences", rows)


def load_ground_truth(root) -> GroundTruth:
    root = Path(root)
    gdir = root / "ground_truth"
    gt = GroundTruth()
    for _, f in read_csv(gdir / "poses.txt"):
        gt.poses[f[0]] = Pose(
            np.array([float(x) for x in f[1:5]]), np.array([float(x) for x in f[5:8]])
        )
    pts_file = gdir / "points3d.txt"
    if pts_file.is_file():
        for _, f in read_csv(pts_file):
            gt.points[int(f[0])] = np.array([float(x) for x in f[1:4]])
    corr_file = gdir / "correspondences.txt"
    if corr_file.is_file():
        for _, f in read_csv(corr_file):
            gt.correspondences.setdefault(f[0], {})[int(f[1])] = int(f[2])
    return gt
