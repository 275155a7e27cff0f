import numpy as np
import pytest

from locmap.datastore import (
    Dataset,
    FeatureStore,
    MapPoint,
    ReconstructedMap,
    Rig,
    image_pose,
    load_dataset,
    load_depth_map,
    save_dataset,
    save_depth_map,
)
from locmap.errors import (
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
from locmap.geometry import Camera, CameraModel, Pose, compose
from locmap import synth


def read_tree(root):
    """All file bytes under a directory keyed by relative path."""
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


def small_scene(seed=5, **kw):
    defaults = dict(
        seed=seed,
        n_points=40,
        n_map_cams=4,
        n_query_cams=2,
        image_width=64,
        image_height=48,
        focal_px=60.0,
    )
    defaults.update(kw)
    return synth.generate_scene(synth.SynthConfig(**defaults))


class TestLoadDataset:
    def test_minimal_dataset(self, tmp_path):
        sensors = tmp_path / "sensors"
        sensors.mkdir()
        (sensors / "sensors.txt").write_text(
            "# sensors version 1.0\ncam0, PINHOLE, 640, 480, 600.0, 600.0, 320.0, 240.0\n"
        )
        ds = load_dataset(tmp_path)
        assert list(ds.cameras) == ["cam0"]
        assert len(ds.trajectories) == 0
        assert len(ds.image_records) == 0
        assert ds.features.is_empty()
        assert ds.map is None

    def test_missing_sensors_file(self, tmp_path):
        with pytest.raises(IoError):
            load_dataset(tmp_path)

    def test_distortion_model_rejected(self, tmp_path):
        sensors = tmp_path / "sensors"
        sensors.mkdir()
        (sensors / "sensors.txt").write_text(
            "# sensors version 1.0\ncam0, RADIAL, 640, 480, 600.0, 320.0, 240.0, 0.1\n"
        )
        with pytest.raises(MalformedCsv):
            load_dataset(tmp_path)

    def test_rigs_and_depth_records_load(self, tmp_path):
        ds, gt = small_scene(rig_spec=(2, 0.3), depth_render=True)
        synth.write_scene(ds, gt, tmp_path)
        ds2 = load_dataset(tmp_path)
        assert "rig0" in ds2.rigs
        assert len(ds2.rigs["rig0"].members) == 2
        assert len(ds2.depth_records) == len(ds.depth_records) > 0

    def test_unknown_sensor_in_records(self, tmp_path):
        sensors = tmp_path / "sensors"
        sensors.mkdir()
        (sensors / "sensors.txt").write_text(
            "# sensors version 1.0\ncam0, PINHOLE, 640, 480, 600.0, 600.0, 320.0, 240.0\n"
        )
        (sensors / "records_camera.txt").write_text(
            "# records_camera version 1.0\n0, ghost, img.png\n"
        )
        with pytest.raises(UnknownSensorRef):
            load_dataset(tmp_path)

    def test_dangling_observation(self, tmp_path):
        ds, gt = small_scene()
        ds.map = ReconstructedMap(
            points={0: MapPoint(np.zeros(3))},
            observations={0: [("map/0000.png", 0)]},
        )
        save_dataset(ds, tmp_path)
        obs = tmp_path / "reconstruction" / "observations.txt"
        obs.write_text(obs.read_text() + "99, synth, map/0000.png, 1\n")
        with pytest.raises(DanglingObservation):
            load_dataset(tmp_path)

    def test_duplicate_observation_rejected(self, tmp_path):
        ds, _ = small_scene()
        ds.map = ReconstructedMap(
            points={0: MapPoint(np.zeros(3)), 1: MapPoint(np.ones(3))},
            observations={0: [("map/0000.png", 0)], 1: [("map/0000.png", 0)]},
        )
        with pytest.raises(InvariantViolation):
            save_dataset(ds, tmp_path)

    def test_malformed_row_reports_line(self, tmp_path):
        sensors = tmp_path / "sensors"
        sensors.mkdir()
        (sensors / "sensors.txt").write_text(
            "# sensors version 1.0\ncam0, PINHOLE, 640\n"
        )
        with pytest.raises(MalformedCsv) as ei:
            load_dataset(tmp_path)
        assert ei.value.line_no == 2

    def test_binary_shape_mismatch(self, tmp_path):
        ds, gt = small_scene()
        synth.write_scene(ds, gt, tmp_path)
        some_kpt = next(
            (tmp_path / "reconstruction" / "keypoints" / "synth").rglob("*.kpt")
        )
        some_kpt.write_bytes(b"\x00" * 7)  # not a multiple of 2 float32 columns
        with pytest.raises(BinaryShapeMismatch):
            load_dataset(tmp_path)


class TestSaveDataset:
    def test_empty_dataset_writes_header_only_sensors(self, tmp_path):
        save_dataset(Dataset(), tmp_path)
        text = (tmp_path / "sensors" / "sensors.txt").read_text()
        assert text == "# sensors version 1.0\n"
        assert not (tmp_path / "sensors" / "trajectories.txt").exists()

    def test_trajectory_rows_sorted(self, tmp_path):
        ds = Dataset()
        ds.cameras["b"] = Camera("b", CameraModel.PINHOLE, 10, 10, (5.0, 5.0, 5.0, 5.0))
        ds.cameras["a"] = Camera("a", CameraModel.PINHOLE, 10, 10, (5.0, 5.0, 5.0, 5.0))
        ds.trajectories.set(7, "b", Pose.identity())
        ds.trajectories.set(3, "a", Pose.identity())
        save_dataset(ds, tmp_path)
        lines = (tmp_path / "sensors" / "trajectories.txt").read_text().splitlines()
        assert len(lines) == 3
        assert lines[1].startswith("3, a") and lines[2].startswith("7, b")

    def test_roundtrip_byte_identical(self, tmp_path):
        ds, gt = small_scene(depth_render=True, rig_spec=(2, 0.25))
        a, b = tmp_path / "a", tmp_path / "b"
        save_dataset(ds, a)
        save_dataset(load_dataset(a), b)
        assert read_tree(a) == read_tree(b)

    def test_load_save_idempotent(self, tmp_path):
        ds, _ = small_scene()
        a, b = tmp_path / "a", tmp_path / "b"
        save_dataset(ds, a)
        once = load_dataset(a)
        save_dataset(once, b)
        twice = load_dataset(b)
        assert sorted(once.cameras) == sorted(twice.cameras)
        assert once.trajectories.entries.keys() == twice.trajectories.entries.keys()
        for key in once.trajectories.entries:
            assert np.array_equal(once.trajectories[key].q, twice.trajectories[key].q)
            assert np.array_equal(once.trajectories[key].t, twice.trajectories[key].t)
        assert once.image_records == twice.image_records
        for img in once.features.keypoints:
            assert np.array_equal(once.features.keypoints[img], twice.features.keypoints[img])

    def test_matches_roundtrip_with_canonical_keys(self, tmp_path):
        ds, _ = small_scene()
        imgs = sorted(ds.features.keypoints)[:2]
        rows = np.array([[0, 1, 0.5], [2, 3, 0.25]], dtype=np.float32)
        ds.features.add_matches(imgs[1], imgs[0], rows)  # reversed on purpose
        save_dataset(ds, tmp_path)
        ds2 = load_dataset(tmp_path)
        got = ds2.features.get_matches(imgs[1], imgs[0])
        assert np.allclose(got, rows)
        canonical = ds2.features.matches[(imgs[0], imgs[1])]
        assert np.allclose(canonical[:, [1, 0, 2]], rows)


class TestDepthMaps:
    def test_all_zero_depth_is_invalid(self, tmp_path):
        path = tmp_path / "d.depth"
        save_depth_map(path, np.zeros((2, 2), dtype=np.float32))
        depth = load_depth_map(path)
        assert depth.shape == (2, 2)
        assert np.count_nonzero(depth) == 0

    def test_plane_depth_via_synth_render(self, tmp_path):
        # noiseless synthetic depth equals camera-frame z at every keypoint
        ds, gt = small_scene(depth_render=True, pixel_noise_sigma=0.0)
        idx = ds.image_index()
        checked = 0
        for img, corr in gt.correspondences.items():
            key = idx[img]
            if key not in ds.depth_records:
                continue
            depth = gt.depth_maps[ds.depth_records[key]]
            pose = gt.poses[img]
            for kp_idx, pid in corr.items():
                kp = ds.features.keypoints[img][kp_idx]
                z = pose.apply(gt.points[pid])[2]
                u, v = int(round(float(kp[0]))), int(round(float(kp[1])))
                assert abs(float(depth[v, u]) - z) < 1e-6
                checked += 1
        assert checked > 50

    def test_size_mismatch(self, tmp_path):
        path = tmp_path / "d.depth"
        path.write_bytes(b"\x00" * 12)  # 3 floats
        (tmp_path / "d.depth.meta").write_text("# depth_meta version 1.0\n2, 2\n")
        with pytest.raises(SizeMismatch):
            load_depth_map(path)

    def test_negative_depth_rejected(self, tmp_path):
        path = tmp_path / "d.depth"
        arr = np.array([[1.0, -0.5], [0.0, 2.0]], dtype=np.float32)
        path.write_bytes(arr.tobytes())
        (tmp_path / "d.depth.meta").write_text("# depth_meta version 1.0\n2, 2\n")
        with pytest.raises(NegativeDepth):
            load_depth_map(path)


class TestImagePose:
    def test_direct_and_rig_resolution(self):
        ds = Dataset()
        cam = Camera("c0", CameraModel.PINHOLE, 10, 10, (5.0, 5.0, 5.0, 5.0))
        ds.cameras["c0"] = cam
        ds.cameras["c1"] = Camera("c1", CameraModel.PINHOLE, 10, 10, (5.0, 5.0, 5.0, 5.0))
        rig = Rig("r", {"c1": Pose(np.array([1.0, 0, 0, 0]), np.array([0.5, 0, 0]))})
        ds.rigs["r"] = rig
        ds.image_records[(0, "c0")] = "a.png"
        ds.image_records[(0, "c1")] = "b.png"
        direct = Pose(np.array([1.0, 0, 0, 0]), np.array([1.0, 2.0, 3.0]))
        ds.trajectories.set(0, "c0", direct)
        rig_pose = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 1.0, 0.0]))
        ds.trajectories.set(0, "r", rig_pose)
        assert np.allclose(image_pose(ds, "a.png").t, direct.t)
        want = compose(rig.members["c1"], rig_pose)
        got = image_pose(ds, "b.png")
        assert np.allclose(got.t, want.t)
        with pytest.raises(MissingPose):
            image_pose(ds, "missing.png")
