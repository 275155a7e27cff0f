"""Spatial (rig) and temporal (sequence) completion of unlocalized queries.

Both passes work on a snapshot of the incoming results: completed poses never
become anchors within the same pass, which makes each pass idempotent, and
DIRECT results are never modified.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from .datastore import Rig
from .geometry import Pose, compose, inverse, pose_from_center, slerp
from .localization import LocalizationResult, Provenance


def rig_complete(
    results: List[LocalizationResult],
    rigs: Dict[str, Rig],
    records: Dict[str, Tuple[int, str]],
) -> List[LocalizationResult]:
    """For each (timestamp, rig) group with at least one DIRECT result, pick
    the member with the most inliers as reference (ties by sensor_id), derive
    the rig pose, and fill every unlocalized member through the calibration.

    records maps image_path -> (timestamp, sensor_id).
    """
    sensor_to_rig = {}
    for rig in rigs.values():
        for sid in rig.members:
            sensor_to_rig[sid] = rig.rig_id

    groups: Dict[Tuple[int, str], List[int]] = {}
    for i, r in enumerate(results):
        rec = records.get(r.image_path)
        if rec is None:
            continue
        ts, sid = rec
        rig_id = sensor_to_rig.get(sid)
        if rig_id is not None:
            groups.setdefault((ts, rig_id), []).append(i)

    out = list(results)
    for (ts, rig_id), idxs in sorted(groups.items()):
        rig = rigs[rig_id]
        anchors = [
            i
            for i in idxs
            if results[i].pose is not None and results[i].provenance is Provenance.DIRECT
        ]
        if not anchors:
            continue
        ref = min(anchors, key=lambda i: (-results[i].num_inliers, records[results[i].image_path][1]))
        ref_sensor = records[results[ref].image_path][1]
        world_to_rig = compose(inverse(rig.members[ref_sensor]), results[ref].pose)
        for i in idxs:
            if results[i].pose is not None:
                continue
            sensor = records[results[i].image_path][1]
            out[i] = LocalizationResult(
                image_path=results[i].image_path,
                pose=compose(rig.members[sensor], world_to_rig),
                num_inliers=results[i].num_inliers,
                num_correspondences=results[i].num_correspondences,
                provenance=Provenance.RIG,
            )
    return out


def _interpolate(p0: Pose, p1: Pose, lam: float) -> Pose:
    """Linear interpolation of camera centers plus slerp on rotations."""
    c = (1.0 - lam) * p0.center() + lam * p1.center()
    return pose_from_center(slerp(p0.q, p1.q, lam), c)


def sequence_complete(
    results: List[LocalizationResult],
    records: Dict[str, Tuple[int, str]],
    max_gap: Optional[int] = None,
) -> List[LocalizationResult]:
    """Complete unlocalized queries along each camera stream (one sensor,
    ordered by timestamp): linear interpolation between the two closest
    localized neighbors, nearest neighbor when only one side exists.

    max_gap, when set, discards anchor candidates farther than that many
    timestamp ticks from the query.
    """
    streams: Dict[str, List[Tuple[int, int]]] = {}  # sensor -> [(ts, result idx)]
    for i, r in enumerate(results):
        rec = records.get(r.image_path)
        if rec is None:
            continue
        ts, sid = rec
        streams.setdefault(sid, []).append((ts, i))

    out = list(results)
    for sid in sorted(streams):
        stream = sorted(streams[sid])
        anchors = [(ts, i) for ts, i in stream if results[i].pose is not None]
        if not anchors:
            continue
        anchor_ts = np.array([ts for ts, _ in anchors], dtype=np.int64)
        for ts, i in stream:
            if results[i].pose is not None:
                continue
            pos = int(np.searchsorted(anchor_ts, ts))
            before = pos - 1
            after = pos
            if max_gap is not None:
                if before >= 0 and ts - anchor_ts[before] > max_gap:
                    before = -1
                if after < len(anchors) and anchor_ts[after] - ts > max_gap:
                    after = len(anchors)
            have_before = before >= 0
            have_after = after < len(anchors)
            if have_before and have_after:
                t0, i0 = anchors[before]
                t1, i1 = anchors[after]
                lam = 0.0 if t1 == t0 else (ts - t0) / (t1 - t0)
                pose = _interpolate(results[i0].pose, results[i1].pose, float(lam))
                prov = Provenance.SEQUENCE_INTERP
            elif have_before or have_after:
                _, ia = anchors[before if have_before else after]
                pose = results[ia].pose
                prov = Provenance.SEQUENCE_NN
            else:
                continue
            out[i] = LocalizationResult(
                image_path=results[i].image_path,
                pose=pose,
                num_inliers=results[i].num_inliers,
                num_correspondences=results[i].num_correspondences,
                provenance=prov,
            )
    return out
