"""Brute-force descriptor matching, epipolar verification, and track building."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatch
from .geometry import Camera, Pose, epipolar_distances

# Epipolar gate defaults mirror the strict/loose reprojection configs (4 / 12 px).
EPIPOLAR_PX_STRICT = 4.0
EPIPOLAR_PX_LOOSE = 12.0


@dataclass
class MatchParams:
    mutual_check: bool = True
    ratio: Optional[float] = None  # Lowe ratio in (0, 1], off by default
    epipolar_px: float = EPIPOLAR_PX_STRICT

    def __post_init__(self):
        if self.ratio is not None and not 0.0 < self.ratio <= 1.0:
            raise ValueError("ratio must be in (0, 1]")
        if self.epipolar_px <= 0:
            raise ValueError("epipolar_px must be > 0")


@dataclass(frozen=True)
class Track:
    """Keypoints across >= 2 images that observe one 3D point; at most one
    keypoint per image."""

    members: Tuple[Tuple[str, int], ...]

    def __post_init__(self):
        imgs = [img for img, _ in self.members]
        if len(set(imgs)) != len(imgs):
            raise ValueError("track holds two keypoints of the same image")
        if len(imgs) < 2:
            raise ValueError("track must span at least 2 images")


def match_descriptors(
    descA: np.ndarray, descB: np.ndarray, params: MatchParams = MatchParams()
) -> np.ndarray:
    """Nearest-neighbor matching under L2; returns rows (idxA, idxB, distance)
    sorted by idxA. Mutual check keeps (i, j) only when i and j are each
    other's nearest neighbors; the ratio test (d1 <= ratio * d2) applies on
    the A -> B side when enabled."""
    descA = np.asarray(descA, dtype=float).reshape(len(descA), -1)
    descB = np.asarray(descB, dtype=float).reshape(len(descB), -1)
    if len(descA) == 0 or len(descB) == 0:
        return np.zeros((0, 3), dtype=np.float32)
    if descA.shape[1] != descB.shape[1]:
        raise DimensionMismatch(
            f"descriptor dims differ: {descA.shape[1]} vs {descB.shape[1]}"
        )
    # |a-b|^2 = |a|^2 + |b|^2 - 2 a.b, clipped for fp safety
    sq = (
        np.sum(descA**2, axis=1)[:, None]
        + np.sum(descB**2, axis=1)[None, :]
        - 2.0 * (descA @ descB.T)
    )
    np.clip(sq, 0.0, None, out=sq)
    nnB = np.argmin(sq, axis=1)
    rows = []
    nnA = np.argmin(sq, axis=0) if params.mutual_check else None
    for i in range(len(descA)):
        j = int(nnB[i])
        if params.mutual_check and int(nnA[j]) != i:
            continue
        if params.ratio is not None and len(descB) >= 2:
            d = sq[i].copy()
            d[j] = np.inf
            d2 = float(np.min(d))
            if sq[i, j] > params.ratio**2 * d2:
                continue
        rows.append((i, j, float(np.sqrt(sq[i, j]))))
    return np.array(rows, dtype=np.float32).reshape(-1, 3)


def verify_matches_epipolar(
    matches: np.ndarray,
    camA: Camera,
    poseA: Pose,
    camB: Camera,
    poseB: Pose,
    kptsA: np.ndarray,
    kptsB: np.ndarray,
    epipolar_px: float,
) -> np.ndarray:
    """Keep matches whose symmetric epipolar distance is <= epipolar_px.
    A degenerate pair (zero baseline, distance +inf) imposes no constraint,
    so everything is retained."""
    matches = np.asarray(matches, dtype=np.float32).reshape(-1, 3)
    if len(matches) == 0:
        return matches
    ia = matches[:, 0].astype(int)
    ib = matches[:, 1].astype(int)
    d = epipolar_distances(
        camA, poseA, np.asarray(kptsA)[ia, :2], camB, poseB, np.asarray(kptsB)[ib, :2]
    )
    keep = (d <= epipolar_px) | np.isinf(d)
    return matches[keep]


class _UnionFind:
    def __init__(self):
        self.parent: Dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb


def build_tracks(
    matches_by_pair: Dict[Tuple[str, str], np.ndarray]
) -> List[Track]:
    """Connected components over (image, keypoint) nodes. Components holding
    two keypoints of one image are discarded whole; components spanning fewer
    than 2 images are dropped. Output is sorted for determinism."""
    uf = _UnionFind()
    for (a, b), rows in matches_by_pair.items():
        for ia, ib, _ in np.asarray(rows).reshape(-1, 3):
            uf.union((a, int(ia)), (b, int(ib)))
    components: Dict = {}
    for node in list(uf.parent):
        components.setdefault(uf.find(node), []).append(node)
    tracks = []
    for nodes in components.values():
        imgs = [img for img, _ in nodes]
        if len(set(imgs)) != len(imgs):
            continue  # conflicting track: discarded whole
        if len(imgs) < 2:
            continue
        tracks.append(Track(tuple(sorted(nodes))))
    tracks.sort(key=lambda t: t.members)
    return tracks


def match_image_pairs(
    descriptors: Dict[str, np.ndarray],
    pairs: Sequence[Tuple[str, str]],
    params: MatchParams = MatchParams(),
    threads: int = 1,
) -> Dict[Tuple[str, str], np.ndarray]:
    """Match descriptors for a list of image pairs; keys are canonical
    (min, max) with rows oriented accordingly. Deterministic regardless of
    thread count."""
    canonical = []
    seen = set()
    for a, b in pairs:
        if a == b:
            continue
        key = (a, b) if a < b else (b, a)
        if key not in seen:
            seen.add(key)
            canonical.append(key)

    def work(key):
        a, b = key
        return key, match_descriptors(descriptors[a], descriptors[b], params)

    if threads > 1 and len(canonical) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, canonical))
    else:
        results = [work(key) for key in canonical]
    return dict(results)
