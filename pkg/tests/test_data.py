import dataclasses
import filecmp

import numpy as np
import pytest
from PIL import Image

from dynsplat.dataio import (
    DataError,
    associate,
    export_tum,
    load_tum,
    read_calibration,
    read_depth,
    read_features,
    read_instances,
    read_trajectory,
    write_calibration,
    write_features,
    write_trajectory,
    instances_to_png,
)
from dynsplat.geometry import Camera, Pose, back_project_depth
from dynsplat.synthetic import Primitive, SynthConfig, synth_generate

SMALL = SynthConfig(width=32, height=24, focal=28.0, n_frames=4, supersample=1, feat_dim=8)


@pytest.fixture(scope="module")
def small_seq():
    return synth_generate(SMALL)


def test_association_nearest_within_window():
    assert associate([1.000], [1.005, 1.50]) == [(0, 0)]
    assert associate([1.000], [1.03]) == []
    assert associate([1.0, 1.01], [1.009]) == [(1, 0)]


def test_depth_scale(tmp_path):
    Image.fromarray(np.array([[5000, 0]], dtype=np.uint16)).save(tmp_path / "d.png")
    np.testing.assert_array_equal(read_depth(tmp_path / "d.png", 5000.0), [[1.0, 0.0]])


def test_feature_file_round_trip(tmp_path, rng):
    feat = rng.normal(size=(3, 5, 7)).astype(np.float32).astype(np.float64)
    write_features(tmp_path / "f.upft", feat)
    raw = (tmp_path / "f.upft").read_bytes()
    assert raw[:4] == b"UPFT" and raw[4:8] == (3).to_bytes(4, "little")
    np.testing.assert_array_equal(read_features(tmp_path / "f.upft"), feat)
    (tmp_path / "bad.upft").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DataError):
        read_features(tmp_path / "bad.upft")
    (tmp_path / "short.upft").write_bytes(raw[:-4])
    with pytest.raises(DataError, match="truncated"):
        read_features(tmp_path / "short.upft")


def test_instance_png_levels(tmp_path):
    a = np.zeros((4, 4), bool)
    a[0] = True
    b = np.zeros((4, 4), bool)
    b[2:, 2:] = True
    instances_to_png(tmp_path / "i.png", [a, b], (4, 4))
    got = read_instances(tmp_path / "i.png")
    assert len(got) == 2
    np.testing.assert_array_equal(got[0], a)
    np.testing.assert_array_equal(got[1], b)


def test_calibration_and_trajectory_round_trip(tmp_path, rng):
    cam = Camera(100.5, 99.25, 31.5, 23.5, 64, 48, 1000.0)
    write_calibration(tmp_path / "c.txt", cam)
    assert read_calibration(tmp_path / "c.txt") == cam
    poses = [Pose.identity().perturb(rng.normal(size=6) * 0.3) for _ in range(5)]
    write_trajectory(tmp_path / "t.txt", np.arange(5) * 0.5, poses)
    line = (tmp_path / "t.txt").read_text().splitlines()[0].split()
    assert len(line) == 8 and all(len(v.split(".")[1]) == 9 for v in line[1:])
    stamps, back = read_trajectory(tmp_path / "t.txt")
    np.testing.assert_array_equal(stamps, np.arange(5) * 0.5)
    for p, q in zip(poses, back):
        np.testing.assert_allclose(q.translation, p.translation, atol=1e-9)
        np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-8)


def test_export_load_round_trip(tmp_path, small_seq):
    export_tum(small_seq, tmp_path / "d")
    back = load_tum(tmp_path / "d")
    assert back.camera == small_seq.camera and back.dropped == 0 and len(back) == len(small_seq)
    for a, b in zip(small_seq.frames, back.frames):
        assert a.timestamp == b.timestamp
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.gt_dynamic, b.gt_dynamic)
        np.testing.assert_array_equal(a.gt_static_rgb, b.gt_static_rgb)
        assert len(a.instances) == len(b.instances)
        for x, y in zip(a.instances, b.instances):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_allclose(b.gt_pose.matrix(), a.gt_pose.matrix(), atol=1e-8)


def test_load_drops_unmatched_rgb(tmp_path, small_seq):
    d = tmp_path / "d"
    export_tum(small_seq, d)
    lines = (d / "depth.txt").read_text().splitlines()
    (d / "depth.txt").write_text("\n".join(lines[:-1]) + "\n")
    seq = load_tum(d)
    assert len(seq) == len(small_seq) - 1 and seq.dropped == 1


def test_load_errors(tmp_path, small_seq):
    with pytest.raises(DataError, match="missing"):
        load_tum(tmp_path)
    d = tmp_path / "d"
    export_tum(small_seq, d)
    (d / "depth.txt").write_text("99.0 depth/none.png\n")
    with pytest.raises(DataError, match="no rgb/depth"):
        load_tum(d)


def test_synth_is_deterministic(tmp_path):
    export_tum(synth_generate(SMALL), tmp_path / "a")
    export_tum(synth_generate(SMALL), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        assert not sub.diff_files and not sub.left_only


def test_synth_dynamic_mask(small_seq):
    assert all(f.gt_dynamic.any() for f in small_seq.frames)
    still = dataclasses.replace(SMALL, dynamic=dataclasses.replace(SMALL.dynamic, velocity=(0.0, 0.0, 0.0)))
    assert not any(f.gt_dynamic.any() for f in synth_generate(still).frames)


def test_bundled_box_crosses_middle_frames():
    seq = synth_generate(SynthConfig())
    mid = seq.frames[len(seq) // 2]
    assert mid.gt_dynamic.sum() > 0


def test_synth_geometry_matches_pose(small_seq):
    # back-projecting a floor pixel lands on the floor plane y = 0.95
    f = small_seq.frames[0]
    v, u = small_seq.camera.height - 1, small_seq.camera.width // 2
    p = back_project_depth(f.depth, f.gt_pose, small_seq.camera, np.array([[v, u]]))[0]
    assert p[1] == pytest.approx(0.95, abs=1e-3)


def test_primitive_validation():
    with pytest.raises(ValueError):
        Primitive("cone", (0, 0, 0), (1,), (1, 1, 1))
    with pytest.raises(ValueError):
        Primitive("box", (0, 0, 0), (1, 0, 1), (1, 1, 1))
