"""Image-pair shortlist strategies: retrieval, pose distance, frustum overlap,
covisibility.

A pair list is a list of (image_a, image_b, score) tuples, best first. For
mapping shortlists pass symmetric=True to collapse unordered duplicates; for
localization keep the default query -> database direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .datastore import ReconstructedMap, read_csv, write_csv, fmt_real
from .errors import DimensionMismatch, MalformedCsv, MissingPose
from .geometry import Camera, Pose, backproject, project_many, rotation_angle_deg

PairList = List[Tuple[str, str, float]]


@dataclass
class RetrievalParams:
    k: int = 20  # top-k most similar database images
    descriptor_type: str = "default"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class DistancePairingParams:
    tau_c: float = 25.0  # meters
    tau_r: float = 45.0  # degrees
    k: int = 20

    def __post_init__(self):
        if self.tau_c <= 0 or self.tau_r <= 0:
            raise ValueError("tau_c and tau_r must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def save_pairs(path, pairs: PairList) -> None:
    write_csv(Path(path), "pairs", [[a, b, fmt_real(s)] for a, b, s in pairs])


def load_pairs(path) -> PairList:
    out: PairList = []
    for line_no, f in read_csv(Path(path)):
        if len(f) != 3:
            raise MalformedCsv(path, line_no, "expected: image_a, image_b, score")
        out.append((f[0], f[1], float(f[2])))
    return out


def _dedup_symmetric(pairs: PairList, best_is_max: bool) -> PairList:
    """Collapse (a,b)/(b,a) duplicates onto the canonical ordering and sort
    globally by score."""
    merged: Dict[Tuple[str, str], float] = {}
    for a, b, s in pairs:
        key = (a, b) if a < b else (b, a)
        if key in merged:
            merged[key] = max(merged[key], s) if best_is_max else min(merged[key], s)
        else:
            merged[key] = s
    items = [(a, b, s) for (a, b), s in merged.items()]
    items.sort(key=lambda p: (-p[2] if best_is_max else p[2], p[0], p[1]))
    return items


def retrieval_pairs(
    query_feats: Dict[str, np.ndarray],
    db_feats: Dict[str, np.ndarray],
    params: RetrievalParams,
    symmetric: bool = False,
) -> PairList:
    """Top-k retrieval by cosine similarity of L2-normalized global features,
    descending; ties broken by database image path ascending."""
    if not query_feats or not db_feats:
        return []
    db_names = sorted(db_feats)
    db = np.stack([np.asarray(db_feats[n], dtype=float).reshape(-1) for n in db_names])
    dims = {v.reshape(-1).shape[0] for v in query_feats.values()} | {db.shape[1]}
    if len(dims) != 1:
        raise DimensionMismatch(f"global feature dimensions differ: {sorted(dims)}")
    db_norm = np.linalg.norm(db, axis=1)
    db_norm[db_norm == 0] = 1.0
    db = db / db_norm[:, None]
    out: PairList = []
    for qname in sorted(query_feats):
        q = np.asarray(query_feats[qname], dtype=float).reshape(-1)
        qn = np.linalg.norm(q)
        if qn > 0:
            q = q / qn
        sims = db @ q
        order = sorted(range(len(db_names)), key=lambda i: (-sims[i], db_names[i]))
        kept = 0
        for i in order:
            if db_names[i] == qname:
                continue
            out.append((qname, db_names[i], float(sims[i])))
            kept += 1
            if kept >= params.k:
                break
    return _dedup_symmetric(out, best_is_max=True) if symmetric else out


def distance_pairs(
    queries: Dict[str, Optional[Pose]],
    db: Dict[str, Optional[Pose]],
    params: DistancePairingParams,
    symmetric: bool = False,
) -> PairList:
    """Rank by the normalized pose distance s = |c_q - c_t| / tau_c +
    angle(R_q, R_t) / tau_r, ascending; top-k kept per query."""
    for name, pose in list(queries.items()) + list(db.items()):
        if pose is None:
            raise MissingPose(name)
    db_names = sorted(db)
    centers = {n: p.center() for n, p in db.items()}
    out: PairList = []
    for qname in sorted(queries):
        qpose = queries[qname]
        qc = qpose.center()
        scored = []
        for tname in db_names:
            if tname == qname:
                continue
            c_diff = float(np.linalg.norm(qc - centers[tname]))
            r_diff = rotation_angle_deg(qpose.q, db[tname].q)
            scored.append((c_diff / params.tau_c + r_diff / params.tau_r, tname))
        scored.sort(key=lambda p: (p[0], p[1]))
        out.extend((qname, t, s) for s, t in scored[: params.k])
    return _dedup_symmetric(out, best_is_max=False) if symmetric else out


def _frustum_samples(cam: Camera, pose: Pose, grid, near: float, far: float):
    nu, nv, nd = grid
    us = (np.arange(nu) + 0.5) / nu * cam.width
    vs = (np.arange(nv) + 0.5) / nv * cam.height
    depths = np.geomspace(near, far, nd)
    pts = np.empty((nu * nv * nd, 3))
    i = 0
    for d in depths:
        for v in vs:
            for u in us:
                pts[i] = backproject(cam, pose, np.array([u, v]), float(d))
                i += 1
    return pts


def frustum_pairs(
    images: Dict[str, Tuple[Camera, Pose]],
    near_m: float = 0.1,
    far_m: float = 50.0,
    grid: Tuple[int, int, int] = (8, 6, 8),
    k: int = 20,
) -> PairList:
    """Score pairs by mutual frustum overlap: the mean over both directions of
    the fraction of one camera's sampled view volume visible in the other.
    Sampling is a deterministic image-plane grid times log-spaced depths."""
    if not near_m < far_m:
        raise ValueError("need near_m < far_m")
    names = sorted(images)
    samples = {n: _frustum_samples(images[n][0], images[n][1], grid, near_m, far_m) for n in names}

    def visible_fraction(pts: np.ndarray, target: str) -> float:
        cam, pose = images[target]
        px, valid = project_many(cam, pose, pts)
        inside = (
            valid
            & (px[:, 0] >= 0)
            & (px[:, 0] < cam.width)
            & (px[:, 1] >= 0)
            & (px[:, 1] < cam.height)
        )
        return float(np.count_nonzero(inside)) / len(pts)

    directed: PairList = []
    overlap: Dict[Tuple[str, str], float] = {}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            score = 0.5 * (visible_fraction(samples[a], b) + visible_fraction(samples[b], a))
            overlap[(a, b)] = score
    for a in names:
        scored = []
        for b in names:
            if a == b:
                continue
            key = (a, b) if a < b else (b, a)
            scored.append((overlap[key], b))
        scored.sort(key=lambda p: (-p[0], p[1]))
        directed.extend((a, b, s) for s, b in scored[:k])
    return _dedup_symmetric(directed, best_is_max=True)


def covisibility_pairs(rec_map: ReconstructedMap, k: int = 20) -> PairList:
    """Score pairs by the number of co-observed 3D points; zero-score pairs
    are omitted."""
    counts: Dict[Tuple[str, str], int] = {}
    for obs in rec_map.observations.values():
        imgs = sorted({img for img, _ in obs})
        for i, a in enumerate(imgs):
            for b in imgs[i + 1 :]:
                counts[(a, b)] = counts.get((a, b), 0) + 1
    per_image: Dict[str, list] = {}
    for (a, b), c in counts.items():
        per_image.setdefault(a, []).append((c, b))
        per_image.setdefault(b, []).append((c, a))
    directed: PairList = []
    for a in sorted(per_image):
        scored = sorted(per_image[a], key=lambda p: (-p[0], p[1]))
        directed.extend((a, b, float(c)) for c, b in scored[:k])
    return _dedup_symmetric(directed, best_is_max=True)
