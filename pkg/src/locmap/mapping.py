"""Map building: multi-view triangulation from known training poses, or RGBD
back-projection of keypoints through recorded depth maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .datastore import Dataset, MapPoint, ReconstructedMap, image_pose, load_depth_map
from .errors import DegenerateGeometry, InvariantViolation, MissingDepth, MissingPose
from .geometry import Camera, backproject, project, triangulate
from .matching import MatchParams, build_tracks, match_descriptors, verify_matches_epipolar
from .pairing import PairList


@dataclass
class MapperConfig:
    min_num_matches: int = 15
    filter_max_reproj_error: float = 4.0  # pixels

    def __post_init__(self):
        if self.min_num_matches <= 0 or self.filter_max_reproj_error <= 0:
            raise ValueError("MapperConfig values must be positive")

    @staticmethod
    def config1() -> "MapperConfig":
        return MapperConfig(min_num_matches=15, filter_max_reproj_error=4.0)

    @staticmethod
    def config2() -> "MapperConfig":
        return MapperConfig(min_num_matches=4, filter_max_reproj_error=12.0)


def image_camera(ds: Dataset, image_path: str) -> Camera:
    rec = ds.image_index().get(image_path)
    if rec is None:
        raise InvariantViolation(f"image {image_path!r} has no camera record")
    return ds.cameras[rec[1]]


def _pair_matches(ds: Dataset, a: str, b: str, mp: MatchParams) -> np.ndarray:
    """Stored matches when present, else brute-force matching of the stored
    descriptors (keeps the pairs->map and pairs->match->map flows equivalent)."""
    stored = ds.features.get_matches(a, b)
    if stored is not None:
        return stored
    return match_descriptors(ds.features.descriptors[a], ds.features.descriptors[b], mp)


def triangulate_map(
    ds: Dataset,
    pairs: PairList,
    mp: MatchParams = MatchParams(),
    mc: MapperConfig = MapperConfig(),
    threads: int = 1,
) -> ReconstructedMap:
    """Triangulate a map from matched image pairs with known training poses.

    Pipeline: per-pair matches -> epipolar verification -> pair gate
    (min_num_matches) -> transitive tracks -> per-track triangulation ->
    reprojection filter (filter_max_reproj_error).
    """
    out = ReconstructedMap()
    if not pairs:
        return out
    images = sorted({a for a, _, _ in pairs} | {b for _, b, _ in pairs})
    poses = {img: image_pose(ds, img) for img in images}
    cams = {img: image_camera(ds, img) for img in images}
    kpts = ds.features.keypoints

    canonical = []
    seen = set()
    for a, b, _ in pairs:
        if a == b:
            continue
        key = (a, b) if a < b else (b, a)
        if key not in seen:
            seen.add(key)
            canonical.append(key)

    def work(key):
        a, b = key
        m = _pair_matches(ds, a, b, mp)
        m = verify_matches_epipolar(
            m, cams[a], poses[a], cams[b], poses[b], kpts[a], kpts[b], mp.epipolar_px
        )
        return key, m

    if threads > 1 and len(canonical) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            verified = dict(pool.map(work, canonical))
    else:
        verified = dict(work(key) for key in canonical)

    verified = {k: m for k, m in verified.items() if len(m) >= mc.min_num_matches}
    tracks = build_tracks(verified)

    next_id = 0
    for track in tracks:
        obs = [(cams[img], poses[img], kpts[img][kp, :2]) for img, kp in track.members]
        try:
            X, residuals = triangulate(obs)
        except DegenerateGeometry:
            continue
        if np.max(residuals) > mc.filter_max_reproj_error:
            continue
        out.points[next_id] = MapPoint(np.asarray(X, dtype=float))
        out.observations[next_id] = sorted(track.members)
        next_id += 1

    _assert_reprojection_bound(ds, out, cams, poses, mc.filter_max_reproj_error)
    out.validate(kpts)
    return out


def _assert_reprojection_bound(ds, rec_map, cams, poses, bound):
    for pid, obs in rec_map.observations.items():
        X = rec_map.points[pid].xyz
        for img, kp in obs:
            px = project(cams[img], poses[img], X)
            if px is None:
                raise InvariantViolation(f"point {pid} behind camera {img!r}")
            err = float(np.linalg.norm(px - ds.features.keypoints[img][kp, :2]))
            if err > bound + 1e-6:
                raise InvariantViolation(
                    f"point {pid} reprojects {err:.3f} px in {img!r}, bound {bound}"
                )


def _depth_map_for(ds: Dataset, key, depth_maps) -> np.ndarray:
    path = ds.depth_records[key]
    if depth_maps is not None and path in depth_maps:
        return depth_maps[path]
    if ds.root is None:
        raise InvariantViolation("dataset has no root directory to read depth from")
    return load_depth_map(ds.root / path)


def rgbd_map(
    ds: Dataset,
    mp: MatchParams = MatchParams(),
    merge: bool = True,
    depth_maps: Optional[Dict[str, np.ndarray]] = None,
) -> ReconstructedMap:
    """Back-project every keypoint with valid depth (nearest-pixel lookup,
    depth > 0) into a 3D point.

    With merge on, keypoints connected by epipolar-verified stored matches are
    unified into one point at the arithmetic mean of the member
    back-projections; only members with valid depth join the merged point.
    Keypoints in conflicting components fall back to singleton points.

    depth_maps optionally supplies in-memory depth arrays keyed by the
    recorded depth path, bypassing disk reads.
    """
    index = ds.image_index()
    mapping_images = []
    poses = {}
    cams = {}
    for img in sorted(ds.features.keypoints):
        key = index.get(img)
        if key is None:
            continue
        try:
            poses[img] = image_pose(ds, img)
        except MissingPose:
            continue  # unposed images (queries) are not mapping images
        if key not in ds.depth_records:
            raise MissingDepth(img)
        cams[img] = ds.cameras[key[1]]
        mapping_images.append(img)

    backprojected: Dict[Tuple[str, int], np.ndarray] = {}
    for img in mapping_images:
        depth = _depth_map_for(ds, index[img], depth_maps)
        h, w = depth.shape
        for kp_idx, kp in enumerate(ds.features.keypoints[img]):
            u = int(round(float(kp[0])))
            v = int(round(float(kp[1])))
            if not (0 <= u < w and 0 <= v < h):
                continue
            d = float(depth[v, u])
            if d <= 0:
                continue
            backprojected[(img, kp_idx)] = backproject(cams[img], poses[img], kp[:2], d)

    out = ReconstructedMap()
    entries = []  # (sorted observation members, xyz)
    merged_nodes = set()
    if merge and ds.features.matches:
        verified = {}
        for (a, b), rows in ds.features.matches.items():
            if a not in poses or b not in poses:
                continue
            v = verify_matches_epipolar(
                rows,
                cams[a],
                poses[a],
                cams[b],
                poses[b],
                ds.features.keypoints[a],
                ds.features.keypoints[b],
                mp.epipolar_px,
            )
            if len(v):
                verified[(a, b)] = v
        for track in build_tracks(verified):
            members = [m for m in track.members if m in backprojected]
            if not members:
                merged_nodes.update(track.members)
                continue
            xyz = np.mean([backprojected[m] for m in members], axis=0)
            entries.append((sorted(members), xyz))
            merged_nodes.update(track.members)

    for node in sorted(backprojected):
        if node not in merged_nodes:
            entries.append(([node], backprojected[node]))

    entries.sort(key=lambda e: e[0])
    for pid, (members, xyz) in enumerate(entries):
        out.points[pid] = MapPoint(np.asarray(xyz, dtype=float))
        out.observations[pid] = members
    out.validate(ds.features.keypoints)
    return out
