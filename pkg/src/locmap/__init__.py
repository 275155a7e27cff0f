"""locmap: unified localization dataset format and structure-based
mapping/localization pipeline (pairing, matching, map building, PnP/RANSAC,
rig/sequence completion, benchmark evaluation)."""

from .datastore import (
    Dataset,
    FeatureStore,
    MapPoint,
    ReconstructedMap,
    Rig,
    Trajectory,
    load_dataset,
    load_depth_map,
    save_dataset,
    save_depth_map,
)
from .geometry import Camera, CameraModel, Pose

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "CameraModel",
    "Dataset",
    "FeatureStore",
    "MapPoint",
    "Pose",
    "ReconstructedMap",
    "Rig",
    "Trajectory",
    "load_dataset",
    "load_depth_map",
    "save_dataset",
    "save_depth_map",
    "__version__",
]
