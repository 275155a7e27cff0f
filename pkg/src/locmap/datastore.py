"""Unified localization dataset format: directory layout, CSV schemas, binary arrays.

Layout under a dataset root:

    sensors/sensors.txt          sensor_id, model, width, height, params...
    sensors/rigs.txt             rig_id, sensor_id, qw, qx, qy, qz, tx, ty, tz
    sensors/trajectories.txt     timestamp, device_id, qw..tz
    sensors/records_camera.txt   timestamp, sensor_id, image_path
    sensors/records_depth.txt    timestamp, sensor_id, depth_path
    reconstruction/keypoints/<type>/<image_path>.kpt
    reconstruction/descriptors/<type>/<image_path>.desc
    reconstruction/global_features/<type>/<image_path>.gfeat
    reconstruction/matches/<type>/<pathA>.overlapping/<pathB>.matches
    reconstruction/points3d.txt  point_id, x, y, z[, r, g, b]
    reconstruction/observations.txt  point_id, keypoints_type, image_path, keypoint_idx

Text files are UTF-8 CSV with ", " separators and a "# <name> version 1.0"
first line; reals are printed with 17 significant digits so float64 round-trips
exactly. Binary arrays are raw little-endian float32, row-major, with one
array_info.txt per feature directory declaring (name, dtype, dsize).
Save order is sorted by primary key, so save -> load -> save is byte-stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import (
    BinaryShapeMismatch,
    DanglingObservation,
    InvariantViolation,
    IoError,
    MalformedCsv,
    MissingPose,
    NegativeDepth,
    SizeMismatch,
    UnknownSensorRef,
)
from .geometry import Camera, CameraModel, Pose, compose

SENSORS_DIR = "sensors"
RECON_DIR = "reconstruction"
MATCH_PAIR_DIR_SUFFIX = ".overlapping"

_KPT_EXT = ".kpt"
_DESC_EXT = ".desc"
_GFEAT_EXT = ".gfeat"
_MATCH_EXT = ".matches"


def fmt_real(x: float) -> str:
    """17 significant digits: exact round-trip for float64."""
    return format(float(x), ".17g")


def _fmt_pose(p: Pose) -> List[str]:
    return [fmt_real(v) for v in (*p.q, *p.t)]


def write_csv(path: Path, name: str, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# {name} version 1.0\n")
            for row in rows:
                fh.write(", ".join(str(v) for v in row) + "\n")
    except OSError as e:
        raise IoError(path, str(e)) from e


def read_csv(path: Path):
    """Yield (line_no, fields) for each data row; validates the header line."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise IoError(path, str(e)) from e
    if not lines or not lines[0].startswith("#"):
        raise MalformedCsv(path, 1, "missing '# <name> version' header line")
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield i, [f.strip() for f in line.split(",")]


def _parse_real(path, line_no, s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise MalformedCsv(path, line_no, f"not a real number: {s!r}") from None
    if not math.isfinite(v):
        raise MalformedCsv(path, line_no, f"non-finite value: {s!r}")
    return v


def _parse_int(path, line_no, s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise MalformedCsv(path, line_no, f"not an integer: {s!r}") from None


def _parse_pose(path, line_no, fields) -> Pose:
    vals = [_parse_real(path, line_no, f) for f in fields]
    try:
        return Pose(np.array(vals[:4]), np.array(vals[4:7]))
    except InvariantViolation as e:
        raise MalformedCsv(path, line_no, str(e)) from None


# --- domain types ---

@dataclass
class Rig:
    """A set of sensors with fixed rig-to-sensor transforms."""

    rig_id: str
    members: Dict[str, Pose] = field(default_factory=dict)  # sensor_id -> pose

    def validate(self):
        if not self.rig_id:
            raise InvariantViolation("rig_id must be non-empty")


@dataclass
class Trajectory:
    """Poses indexed by (timestamp, device_id); device is a sensor or a rig."""

    entries: Dict[Tuple[int, str], Pose] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def __getitem__(self, key) -> Pose:
        return self.entries[key]

    def get(self, key, default=None):
        return self.entries.get(key, default)

    def set(self, timestamp: int, device_id: str, pose: Pose):
        self.entries[(int(timestamp), device_id)] = pose


@dataclass
class FeatureStore:
    """Per-image binary feature arrays plus pairwise matches.

    Matches are keyed by the lexicographically ordered pair (a, b) with a < b;
    each row is (idx_in_a, idx_in_b, score) as float32.
    """

    keypoints: Dict[str, np.ndarray] = field(default_factory=dict)
    descriptors: Dict[str, np.ndarray] = field(default_factory=dict)
    global_features: Dict[str, np.ndarray] = field(default_factory=dict)
    matches: Dict[Tuple[str, str], np.ndarray] = field(default_factory=dict)
    keypoints_type: str = "default"
    descriptors_type: str = "default"
    global_features_type: str = "default"
    matches_type: str = "default"

    def is_empty(self) -> bool:
        return not (self.keypoints or self.descriptors or self.global_features or self.matches)

    def add_matches(self, image_a: str, image_b: str, rows: np.ndarray):
        """Store matches under the canonical (min, max) key, swapping columns
        when needed."""
        rows = np.asarray(rows, dtype=np.float32).reshape(-1, 3)
        if image_a == image_b:
            raise InvariantViolation("cannot store matches of an image with itself")
        if image_a < image_b:
            self.matches[(image_a, image_b)] = rows
        else:
            self.matches[(image_b, image_a)] = rows[:, [1, 0, 2]]

    def get_matches(self, image_a: str, image_b: str) -> Optional[np.ndarray]:
        """Matches oriented as (idx in image_a, idx in image_b, score)."""
        if image_a < image_b:
            return self.matches.get((image_a, image_b))
        m = self.matches.get((image_b, image_a))
        return None if m is None else m[:, [1, 0, 2]]

    def validate(self):
        for img, kpts in self.keypoints.items():
            if kpts.ndim != 2 or kpts.shape[1] < 2:
                raise InvariantViolation(f"keypoints of {img!r} must be (n, >=2)")
        for img, desc in self.descriptors.items():
            if img in self.keypoints and len(desc) != len(self.keypoints[img]):
                raise InvariantViolation(
                    f"{img!r}: {len(desc)} descriptor rows vs "
                    f"{len(self.keypoints[img])} keypoints"
                )
        for (a, b), rows in self.matches.items():
            if not a < b:
                raise InvariantViolation(f"match key not canonical: ({a!r}, {b!r})")
            for img, col in ((a, 0), (b, 1)):
                if img in self.keypoints and len(rows):
                    idx = rows[:, col].astype(int)
                    if idx.min() < 0 or idx.max() >= len(self.keypoints[img]):
                        raise InvariantViolation(
                            f"match index out of bounds for {img!r}"
                        )


@dataclass
class MapPoint:
    xyz: np.ndarray
    rgb: Optional[Tuple[int, int, int]] = None


@dataclass
class ReconstructedMap:
    """3D points plus observations linking them to (image, keypoint) pairs."""

    points: Dict[int, MapPoint] = field(default_factory=dict)
    observations: Dict[int, List[Tuple[str, int]]] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not self.points

    def observations_by_image(self) -> Dict[str, Dict[int, int]]:
        """image_path -> {keypoint_idx: point_id}"""
        out: Dict[str, Dict[int, int]] = {}
        for pid, obs in self.observations.items():
            for img, kp in obs:
                out.setdefault(img, {})[kp] = pid
        return out

    def validate(self, keypoints: Optional[Dict[str, np.ndarray]] = None):
        seen = set()
        for pid, obs in self.observations.items():
            if pid not in self.points:
                raise DanglingObservation(pid)
            for img, kp in obs:
                if (img, kp) in seen:
                    raise InvariantViolation(
                        f"keypoint ({img!r}, {kp}) observed by two points"
                    )
                seen.add((img, kp))
                if keypoints is not None and img in keypoints:
                    if kp < 0 or kp >= len(keypoints[img]):
                        raise InvariantViolation(
                            f"observation keypoint index {kp} out of bounds for {img!r}"
                        )


@dataclass
class Dataset:
    """In-memory record of one dataset directory. Immutable by convention
    after load; loading and saving are single-threaded per call."""

    cameras: Dict[str, Camera] = field(default_factory=dict)
    rigs: Dict[str, Rig] = field(default_factory=dict)
    trajectories: Trajectory = field(default_factory=Trajectory)
    image_records: Dict[Tuple[int, str], str] = field(default_factory=dict)
    depth_records: Dict[Tuple[int, str], str] = field(default_factory=dict)
    features: FeatureStore = field(default_factory=FeatureStore)
    map: Optional[ReconstructedMap] = None
    root: Optional[Path] = None  # set on load; not part of the serialized format

    def record_of_image(self, image_path: str) -> Optional[Tuple[int, str]]:
        for key, path in self.image_records.items():
            if path == image_path:
                return key
        return None

    def image_index(self) -> Dict[str, Tuple[int, str]]:
        return {path: key for key, path in self.image_records.items()}

    def validate(self):
        for rig in self.rigs.values():
            rig.validate()
            for sid in rig.members:
                if sid not in self.cameras:
                    raise UnknownSensorRef(sid, f"rig {rig.rig_id!r} member")
        for (_, dev) in self.trajectories.entries:
            if dev not in self.cameras and dev not in self.rigs:
                raise UnknownSensorRef(dev, "trajectory device")
        for (_, sid) in self.image_records:
            if sid not in self.cameras:
                raise UnknownSensorRef(sid, "camera record")
        for (_, sid) in self.depth_records:
            if sid not in self.cameras:
                raise UnknownSensorRef(sid, "depth record")
        self.features.validate()
        if self.map is not None:
            self.map.validate(self.features.keypoints)


def image_pose(ds: Dataset, image_path: str) -> Pose:
    """World-to-camera pose of a recorded image, resolving rig-relative poses
    (pose = rig_to_sensor o world_to_rig). Raises MissingPose."""
    rec = ds.image_index().get(image_path)
    if rec is None:
        raise MissingPose(image_path)
    ts, sensor_id = rec
    direct = ds.trajectories.get((ts, sensor_id))
    if direct is not None:
        return direct
    for rig in ds.rigs.values():
        if sensor_id in rig.members:
            rig_pose = ds.trajectories.get((ts, rig.rig_id))
            if rig_pose is not None:
                return compose(rig.members[sensor_id], rig_pose)
    raise MissingPose(image_path)


# --- binary arrays ---

def write_array(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(arr, dtype="<f4")
    try:
        with open(path, "wb") as fh:
            fh.write(data.tobytes())
    except OSError as e:
        raise IoError(path, str(e)) from e


def read_array(path: Path, dsize: int) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoError(path, str(e)) from e
    if len(raw) % (4 * dsize) != 0:
        raise BinaryShapeMismatch(
            path, f"{len(raw)} bytes is not a multiple of {dsize} float32 columns"
        )
    flat = np.frombuffer(raw, dtype="<f4")
    return flat.reshape(-1, dsize).copy()


def _write_array_info(dirpath: Path, name: str, dsize: int) -> None:
    write_csv(dirpath / "array_info.txt", "array_info", [[name, "float32", dsize]])


def _read_array_info(dirpath: Path) -> Tuple[str, int]:
    info_path = dirpath / "array_info.txt"
    name = dtype = None
    dsize = None
    for line_no, fields in read_csv(info_path):
        if len(fields) != 3:
            raise MalformedCsv(info_path, line_no, "expected: name, dtype, dsize")
        name, dtype, dsize = fields[0], fields[1], _parse_int(info_path, line_no, fields[2])
    if name is None:
        raise MalformedCsv(info_path, 1, "empty array_info file")
    if dtype != "float32":
        raise MalformedCsv(info_path, 2, f"unsupported dtype {dtype!r}")
    if dsize <= 0:
        raise MalformedCsv(info_path, 2, "dsize must be positive")
    return name, dsize


def _single_type_dir(parent: Path) -> Optional[Path]:
    if not parent.is_dir():
        return None
    subdirs = sorted(p for p in parent.iterdir() if p.is_dir())
    if not subdirs:
        return None
    if len(subdirs) > 1:
        raise InvariantViolation(
            f"{parent}: multiple feature types {[p.name for p in subdirs]}; "
            "exactly one is supported"
        )
    return subdirs[0]


# --- save ---

def save_dataset(ds: Dataset, root) -> None:
    """Write the full directory layout; deterministic row order (sorted by
    primary keys) so round-trips are byte-stable."""
    ds.validate()
    root = Path(root)
    sensors = root / SENSORS_DIR
    sensors.mkdir(parents=True, exist_ok=True)

    rows = []
    for sid in sorted(ds.cameras):
        cam = ds.cameras[sid]
        rows.append(
            [sid, cam.model.value, cam.width, cam.height]
            + [fmt_real(p) for p in cam.params]
        )
    write_csv(sensors / "sensors.txt", "sensors", rows)

    if ds.rigs:
        rows = []
        for rid in sorted(ds.rigs):
            for sid in sorted(ds.rigs[rid].members):
                rows.append([rid, sid] + _fmt_pose(ds.rigs[rid].members[sid]))
        write_csv(sensors / "rigs.txt", "rigs", rows)

    if len(ds.trajectories):
        rows = [
            [ts, dev] + _fmt_pose(ds.trajectories[(ts, dev)])
            for ts, dev in sorted(ds.trajectories.entries)
        ]
        write_csv(sensors / "trajectories.txt", "trajectories", rows)

    if ds.image_records:
        rows = [
            [ts, sid, ds.image_records[(ts, sid)]]
            for ts, sid in sorted(ds.image_records)
        ]
        write_csv(sensors / "records_camera.txt", "records_camera", rows)

    if ds.depth_records:
        rows = [
            [ts, sid, ds.depth_records[(ts, sid)]]
            for ts, sid in sorted(ds.depth_records)
        ]
        write_csv(sensors / "records_depth.txt", "records_depth", rows)

    recon = root / RECON_DIR
    fs = ds.features
    if fs.keypoints:
        base = recon / "keypoints" / fs.keypoints_type
        dsize = next(iter(fs.keypoints.values())).shape[1]
        _write_array_info(base, fs.keypoints_type, dsize)
        for img in sorted(fs.keypoints):
            write_array(base / (img + _KPT_EXT), fs.keypoints[img])
    if fs.descriptors:
        base = recon / "descriptors" / fs.descriptors_type
        dsize = next(iter(fs.descriptors.values())).shape[1]
        _write_array_info(base, fs.descriptors_type, dsize)
        for img in sorted(fs.descriptors):
            write_array(base / (img + _DESC_EXT), fs.descriptors[img])
    if fs.global_features:
        base = recon / "global_features" / fs.global_features_type
        dsize = next(iter(fs.global_features.values())).reshape(1, -1).shape[1]
        _write_array_info(base, fs.global_features_type, dsize)
        for img in sorted(fs.global_features):
            write_array(
                base / (img + _GFEAT_EXT), fs.global_features[img].reshape(1, -1)
            )
    if fs.matches:
        base = recon / "matches" / fs.matches_type
        _write_array_info(base, fs.matches_type, 3)
        for a, b in sorted(fs.matches):
            path = base / (a + MATCH_PAIR_DIR_SUFFIX) / (b + _MATCH_EXT)
            write_array(path, fs.matches[(a, b)])

    if ds.map is not None and not ds.map.is_empty():
        rows = []
        for pid in sorted(ds.map.points):
            pt = ds.map.points[pid]
            row = [pid] + [fmt_real(v) for v in pt.xyz]
            if pt.rgb is not None:
                row += [int(c) for c in pt.rgb]
            rows.append(row)
        write_csv(recon / "points3d.txt", "points3d", rows)
        rows = []
        for pid in sorted(ds.map.observations):
            for img, kp in sorted(ds.map.observations[pid]):
                rows.append([pid, fs.keypoints_type, img, kp])
        write_csv(recon / "observations.txt", "observations", rows)


# --- load ---

def _load_sensors(path: Path) -> Dict[str, Camera]:
    cams: Dict[str, Camera] = {}
    for line_no, f in read_csv(path):
        if len(f) < 4:
            raise MalformedCsv(path, line_no, "expected: sensor_id, model, w, h, params...")
        sid, model_s = f[0], f[1]
        if sid in cams:
            raise MalformedCsv(path, line_no, f"duplicate sensor_id {sid!r}")
        try:
            model = CameraModel(model_s)
        except ValueError:
            raise MalformedCsv(
                path,
                line_no,
                f"unsupported camera model {model_s!r} (distortion models are rejected)",
            ) from None
        w = _parse_int(path, line_no, f[2])
        h = _parse_int(path, line_no, f[3])
        params = [_parse_real(path, line_no, p) for p in f[4:]]
        try:
            cams[sid] = Camera(sid, model, w, h, tuple(params))
        except InvariantViolation as e:
            raise MalformedCsv(path, line_no, str(e)) from None
    return cams


def load_dataset(root) -> Dataset:
    """Parse and validate a dataset directory. Missing optional files yield
    empty collections; sensors.txt is mandatory."""
    root = Path(root)
    sensors = root / SENSORS_DIR
    sensors_file = sensors / "sensors.txt"
    if not sensors_file.is_file():
        raise IoError(sensors_file, "mandatory file missing")
    ds = Dataset(cameras=_load_sensors(sensors_file), root=root)

    rigs_file = sensors / "rigs.txt"
    if rigs_file.is_file():
        for line_no, f in read_csv(rigs_file):
            if len(f) != 9:
                raise MalformedCsv(rigs_file, line_no, "expected 9 fields")
            rid, sid = f[0], f[1]
            pose = _parse_pose(rigs_file, line_no, f[2:9])
            rig = ds.rigs.setdefault(rid, Rig(rid))
            if sid in rig.members:
                raise MalformedCsv(
                    rigs_file, line_no, f"duplicate member {sid!r} in rig {rid!r}"
                )
            rig.members[sid] = pose

    traj_file = sensors / "trajectories.txt"
    if traj_file.is_file():
        for line_no, f in read_csv(traj_file):
            if len(f) != 9:
                raise MalformedCsv(traj_file, line_no, "expected 9 fields")
            ts = _parse_int(traj_file, line_no, f[0])
            key = (ts, f[1])
            if key in ds.trajectories:
                raise MalformedCsv(traj_file, line_no, f"duplicate key {key}")
            ds.trajectories.entries[key] = _parse_pose(traj_file, line_no, f[2:9])

    for fname, target in (
        ("records_camera.txt", ds.image_records),
        ("records_depth.txt", ds.depth_records),
    ):
        rec_file = sensors / fname
        if rec_file.is_file():
            for line_no, f in read_csv(rec_file):
                if len(f) != 3:
                    raise MalformedCsv(rec_file, line_no, "expected 3 fields")
                ts = _parse_int(rec_file, line_no, f[0])
                key = (ts, f[1])
                if key in target:
                    raise MalformedCsv(rec_file, line_no, f"duplicate key {key}")
                target[key] = f[2]

    recon = root / RECON_DIR
    fs = ds.features
    for kind, ext, store_name, type_name in (
        ("keypoints", _KPT_EXT, "keypoints", "keypoints_type"),
        ("descriptors", _DESC_EXT, "descriptors", "descriptors_type"),
        ("global_features", _GFEAT_EXT, "global_features", "global_features_type"),
    ):
        tdir = _single_type_dir(recon / kind)
        if tdir is None:
            continue
        _, dsize = _read_array_info(tdir)
        setattr(fs, type_name, tdir.name)
        store = getattr(fs, store_name)
        for p in sorted(tdir.rglob("*" + ext)):
            img = p.relative_to(tdir).as_posix()[: -len(ext)]
            arr = read_array(p, dsize)
            store[img] = arr[0] if kind == "global_features" else arr

    mdir = _single_type_dir(recon / "matches")
    if mdir is not None:
        _read_array_info(mdir)
        fs.matches_type = mdir.name
        for p in sorted(mdir.rglob("*" + _MATCH_EXT)):
            rel = p.relative_to(mdir).as_posix()
            head, sep, tail = rel.rpartition(MATCH_PAIR_DIR_SUFFIX + "/")
            if not sep:
                raise BinaryShapeMismatch(p, "match file outside a pair directory")
            a = head
            b = tail[: -len(_MATCH_EXT)]
            if not a < b:
                raise InvariantViolation(
                    f"{p}: match pair not in lexicographic order ({a!r} vs {b!r})"
                )
            fs.matches[(a, b)] = read_array(p, 3)

    pts_file = recon / "points3d.txt"
    obs_file = recon / "observations.txt"
    if pts_file.is_file():
        ds.map = ReconstructedMap()
        for line_no, f in read_csv(pts_file):
            if len(f) not in (4, 7):
                raise MalformedCsv(pts_file, line_no, "expected 4 or 7 fields")
            pid = _parse_int(pts_file, line_no, f[0])
            if pid in ds.map.points:
                raise MalformedCsv(pts_file, line_no, f"duplicate point_id {pid}")
            xyz = np.array([_parse_real(pts_file, line_no, v) for v in f[1:4]])
            rgb = None
            if len(f) == 7:
                rgb = tuple(_parse_int(pts_file, line_no, v) for v in f[4:7])
            ds.map.points[pid] = MapPoint(xyz, rgb)
    if obs_file.is_file():
        if ds.map is None:
            ds.map = ReconstructedMap()
        for line_no, f in read_csv(obs_file):
            if len(f) != 4:
                raise MalformedCsv(obs_file, line_no, "expected 4 fields")
            pid = _parse_int(obs_file, line_no, f[0])
            if f[1] != fs.keypoints_type:
                raise MalformedCsv(
                    obs_file,
                    line_no,
                    f"keypoints type {f[1]!r} does not match loaded type "
                    f"{fs.keypoints_type!r}",
                )
            kp = _parse_int(obs_file, line_no, f[3])
            ds.map.observations.setdefault(pid, []).append((f[2], kp))

    ds.validate()
    return ds


# --- depth maps ---

def save_depth_map(path, depth: np.ndarray) -> None:
    """Write a (height, width) float32 depth map plus its .meta sidecar."""
    path = Path(path)
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise SizeMismatch(f"{path}: depth map must be 2-D, got shape {depth.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "wb") as fh:
            fh.write(np.ascontiguousarray(depth).tobytes())
    except OSError as e:
        raise IoError(path, str(e)) from e
    h, w = depth.shape
    write_csv(Path(str(path) + ".meta"), "depth_meta", [[w, h]])


def load_depth_map(path) -> np.ndarray:
    """Read a depth map as a (height, width) float32 array, meters; 0 marks
    invalid pixels. Negative values are rejected."""
    path = Path(path)
    meta_path = Path(str(path) + ".meta")
    w = h = None
    for line_no, f in read_csv(meta_path):
        if len(f) != 2:
            raise MalformedCsv(meta_path, line_no, "expected: width, height")
        w = _parse_int(meta_path, line_no, f[0])
        h = _parse_int(meta_path, line_no, f[1])
    if w is None or w <= 0 or h <= 0:
        raise MalformedCsv(meta_path, 1, "missing or invalid width/height")
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoError(path, str(e)) from e
    if len(raw) != 4 * w * h:
        raise SizeMismatch(
            f"{path}: payload has {len(raw) // 4} floats, meta declares {w}x{h}"
        )
    depth = np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
    if np.any(depth < 0):
        raise NegativeDepth(f"{path}: negative depth values present")
    return depth
