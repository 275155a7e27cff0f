"""Benchmark metrics: bucketed recall at paired translation/rotation
thresholds, and median position/orientation errors over localized queries."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .datastore import fmt_real, write_csv
from .errors import InvariantViolation, MissingGroundTruth, NoLocalizedQueries
from .geometry import Pose, rotation_angle_deg
from .localization import LocalizationResult


@dataclass(frozen=True)
class ThresholdBins:
    """Ordered (name, max translation m, max rotation deg) accuracy buckets;
    limits must be non-decreasing."""

    bins: Tuple[Tuple[str, float, float], ...]

    def __post_init__(self):
        prev_t = prev_r = 0.0
        for name, max_t, max_r in self.bins:
            if max_t < prev_t or max_r < prev_r:
                raise InvariantViolation(
                    f"bins must be monotone non-decreasing (violated at {name!r})"
                )
            prev_t, prev_r = max_t, max_r


OUTDOOR = ThresholdBins((("high", 0.25, 2.0), ("mid", 0.5, 5.0), ("low", 5.0, 10.0)))
INDOOR_TIGHT = ThresholdBins((("high", 0.1, 1.0), ("mid", 0.25, 2.0), ("low", 1.0, 5.0)))
SEVEN_SCENES = ThresholdBins((("all", 0.05, 5.0),))

PRESETS = {"outdoor": OUTDOOR, "indoor_tight": INDOOR_TIGHT, "seven_scenes": SEVEN_SCENES}


def pose_error(est: Pose, gt: Pose) -> Tuple[float, float]:
    """(camera-center distance in meters, rotation angle in degrees)."""
    return (
        float(np.linalg.norm(est.center() - gt.center())),
        rotation_angle_deg(est.q, gt.q),
    )


def bucket_recall(
    results: Sequence[LocalizationResult],
    gt_poses: Dict[str, Pose],
    bins: ThresholdBins,
) -> Dict[str, float]:
    """Percentage of queries localized within each (<= max_t, <= max_r) bin.
    Unlocalized queries count in no bin; the denominator is the total number
    of ground-truth queries."""
    total = len(gt_poses)
    if total == 0:
        raise MissingGroundTruth("<empty ground truth>")
    hits = {name: 0 for name, _, _ in bins.bins}
    for r in results:
        if r.image_path not in gt_poses:
            raise MissingGroundTruth(r.image_path)
        if r.pose is None:
            continue
        err_t, err_r = pose_error(r.pose, gt_poses[r.image_path])
        for name, max_t, max_r in bins.bins:
            if err_t <= max_t and err_r <= max_r:
                hits[name] += 1
    recall = {name: 100.0 * hits[name] / total for name, _, _ in bins.bins}
    values = list(recall.values())
    if any(values[i] > values[i + 1] + 1e-9 for i in range(len(values) - 1)):
        raise InvariantViolation("recall must be monotone across nested bins")
    return recall


def median_errors(
    results: Sequence[LocalizationResult], gt_poses: Dict[str, Pose]
) -> Tuple[float, float]:
    """Median (meters, degrees) over localized queries only; even counts use
    the mean of the two central values."""
    errs_t, errs_r = [], []
    for r in results:
        if r.pose is None:
            continue
        if r.image_path not in gt_poses:
            raise MissingGroundTruth(r.image_path)
        et, er = pose_error(r.pose, gt_poses[r.image_path])
        errs_t.append(et)
        errs_r.append(er)
    if not errs_t:
        raise NoLocalizedQueries("no localized query to take a median over")
    return float(np.median(errs_t)), float(np.median(errs_r))


def format_report(
    results: Sequence[LocalizationResult],
    gt_poses: Dict[str, Pose],
    bins: ThresholdBins,
    title: str = "localization results",
) -> str:
    recall = bucket_recall(results, gt_poses, bins)
    localized = sum(1 for r in results if r.pose is not None)
    lines = [title]
    header = ["avg. all bins"] + [name for name, _, _ in bins.bins]
    avg = sum(recall.values()) / len(recall)
    row = [f"{avg:.1f}"] + [f"{recall[name]:.1f}" for name, _, _ in bins.bins]
    width = max(len(h) for h in header) + 2
    lines.append("".join(h.rjust(width) for h in header))
    lines.append("".join(v.rjust(width) for v in row))
    for name, max_t, max_r in bins.bins:
        lines.append(f"  {name}: {max_t}m, {max_r} deg")
    lines.append(f"localized: {localized}/{len(gt_poses)}")
    if localized:
        med_t, med_r = median_errors(results, gt_poses)
        lines.append(f"median error: {med_t:.4f} m / {med_r:.4f} deg")
    else:
        lines.append("median error: n/a (no localized queries)")
    return "\n".join(lines) + "\n"


def save_metrics_csv(
    path,
    results: Sequence[LocalizationResult],
    gt_poses: Dict[str, Pose],
    bins: ThresholdBins,
) -> None:
    """Machine-readable metrics: one row per bin at full precision, then the
    localized count and medians."""
    recall = bucket_recall(results, gt_poses, bins)
    rows: List[List] = [
        ["bin", name, fmt_real(max_t), fmt_real(max_r), fmt_real(recall[name])]
        for name, max_t, max_r in bins.bins
    ]
    localized = sum(1 for r in results if r.pose is not None)
    rows.append(["localized", localized, len(gt_poses), "", ""])
    if localized:
        med_t, med_r = median_errors(results, gt_poses)
        rows.append(["median", fmt_real(med_t), fmt_real(med_r), "", ""])
    write_csv(Path(path), "metrics", rows)
