import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmdtrack.data import (
    Box3D,
    ConfigError,
    PointFrame,
    ScenarioConfig,
    SequenceFormatError,
    SequenceSample,
    crop_search_region,
    generate_synthetic_sequence,
    read_kitti_frame,
    read_sequence_dir,
    resample_points,
    write_sequence_dir,
)


def test_box_theta_wrapped():
    assert Box3D([0, 0, 0], [1, 1, 1], np.pi).theta == pytest.approx(-np.pi)
    assert Box3D([0, 0, 0], [1, 1, 1], 3.5).theta == pytest.approx(3.5 - 2 * np.pi)
    with pytest.raises(ValueError):
        Box3D([0, 0, 0], [1, 0, 1], 0)


def test_pointframe_feats_rows_checked():
    with pytest.raises(ValueError):
        PointFrame(np.zeros((3, 3)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        PointFrame(np.array([[0, np.nan, 0]]))


def test_generate_shapes_and_size():
    s = generate_synthetic_sequence(ScenarioConfig(seed=0, L=8, points_per_frame=128))
    assert len(s) == 8
    assert all(len(f) == 128 for f in s.frames)
    np.testing.assert_array_equal(s.gt_boxes[0].size, s.target_size)


def test_generate_deterministic():
    a = generate_synthetic_sequence(ScenarioConfig(seed=3))
    b = generate_synthetic_sequence(ScenarioConfig(seed=3))
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.coords, fb.coords)
    for la, lb in zip(a.labels, b.labels):
        assert np.array_equal(la, lb)
    assert all(np.array_equal(x.as_array(), y.as_array()) for x, y in zip(a.gt_boxes, b.gt_boxes))


def test_full_occlusion_frame():
    s = generate_synthetic_sequence(ScenarioConfig(seed=1, occlusion_schedule={3: 1.0}))
    assert s.labels[3].sum() == 0
    assert len(s.frames[3]) > 0
    assert s.labels[2].sum() > 0


@pytest.mark.parametrize("bad", [
    dict(L=1), dict(points_per_frame=0), dict(target_speed=(2.0, 1.0)),
    dict(occlusion_schedule={2: 1.5}), dict(num_distractors=-1), dict(noise_sigma=-0.1),
])
def test_generate_rejects_invalid(bad):
    with pytest.raises(ConfigError):
        generate_synthetic_sequence(ScenarioConfig(**bad))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.1))
def test_members_inside_dilated_box(seed, noise):
    s = generate_synthetic_sequence(ScenarioConfig(seed=seed, noise_sigma=noise))
    for f, lb, box in zip(s.frames, s.labels, s.gt_boxes):
        assert box.contains(f.coords[lb], dilation=3 * noise).all()


def test_distractors_keep_gap():
    # point budget fully used by target + distractors, so every non-member is a distractor point
    cfg = ScenarioConfig(seed=5, num_distractors=2, distractor_min_gap=1.0, noise_sigma=0.0,
                         target_fraction=0.4, distractor_fraction=0.3)
    s = generate_synthetic_sequence(cfg)
    r_t = 0.5 * np.hypot(*s.target_size[:2])
    for f, lb, box in zip(s.frames, s.labels, s.gt_boxes):
        d = np.linalg.norm(f.coords[~lb, :2] - box.center[:2], axis=1)
        assert d.size and d.min() >= r_t + cfg.distractor_min_gap - 1e-9


def test_sequence_dir_roundtrip(tmp_path):
    s = generate_synthetic_sequence(ScenarioConfig(seed=2))
    write_sequence_dir(s, tmp_path / "seq")
    r = read_sequence_dir(tmp_path / "seq")
    assert len(r) == len(s)
    for fa, fb in zip(s.frames, r.frames):
        np.testing.assert_allclose(fa.coords, fb.coords, atol=1e-6, rtol=0)
    for ba, bb in zip(s.gt_boxes, r.gt_boxes):
        np.testing.assert_allclose(ba.as_array(), bb.as_array(), atol=1e-6, rtol=0)
    for la, lb in zip(s.labels, r.labels):
        assert np.array_equal(la, lb)


def test_boxes_csv_negative_width(tmp_path):
    s = generate_synthetic_sequence(ScenarioConfig(seed=2, L=3))
    write_sequence_dir(s, tmp_path)
    lines = (tmp_path / "boxes.csv").read_text().splitlines()
    parts = lines[2].split(",")
    parts[4] = "-1.0"
    lines[2] = ",".join(parts)
    (tmp_path / "boxes.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(SequenceFormatError, match=r"boxes\.csv:3"):
        read_sequence_dir(tmp_path)


def test_meta_frame_count_mismatch(tmp_path):
    s = generate_synthetic_sequence(ScenarioConfig(seed=2, L=8))
    write_sequence_dir(s, tmp_path)
    (tmp_path / "frame_007.xyz").unlink()
    with pytest.raises(SequenceFormatError, match="meta.json"):
        read_sequence_dir(tmp_path)


def test_malformed_xyz_names_file_and_line(tmp_path):
    s = generate_synthetic_sequence(ScenarioConfig(seed=2, L=2))
    write_sequence_dir(s, tmp_path)
    p = tmp_path / "frame_001.xyz"
    lines = p.read_text().splitlines()
    lines[4] = "1.0 abc 2.0"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(SequenceFormatError, match=r"frame_001\.xyz:5"):
        read_sequence_dir(tmp_path)


def test_kitti_two_records(tmp_path):
    raw = struct.pack("<8f", 1.0, 2.0, 3.0, 0.5, -4.0, 5.5, 6.25, 0.75)
    p = tmp_path / "000000.bin"
    p.write_bytes(raw)
    label = "0 1 Car 0 0 -1.5 100 100 200 200 1.5 1.6 3.9 2.0 1.7 10.0 0.3".split()
    frame, box = read_kitti_frame(p, label)
    np.testing.assert_array_equal(frame.coords, [[1, 2, 3], [-4, 5.5, 6.25]])
    np.testing.assert_array_equal(frame.feats[:, 0], [0.5, 0.75])
    np.testing.assert_allclose(box.size, [1.6, 3.9, 1.5])
    np.testing.assert_allclose(box.center, [2.0, 1.7 - 0.75, 10.0])
    assert box.theta == pytest.approx(0.3)


def test_kitti_empty_and_truncated(tmp_path):
    (tmp_path / "e.bin").write_bytes(b"")
    frame, _ = read_kitti_frame(tmp_path / "e.bin", {"h": 1, "w": 1, "l": 1, "x": 0, "y": 0, "z": 0, "ry": 0})
    assert len(frame) == 0
    (tmp_path / "t.bin").write_bytes(b"\x00" * 17)
    with pytest.raises(SequenceFormatError):
        read_kitti_frame(tmp_path / "t.bin", ["1"] * 7)


def test_kitti_non_numeric_label(tmp_path):
    (tmp_path / "e.bin").write_bytes(b"")
    with pytest.raises(SequenceFormatError):
        read_kitti_frame(tmp_path / "e.bin", ["1", "1", "x", "0", "0", "0", "0"])


def test_crop_examples():
    box = Box3D([0, 0, 0], [2, 2, 2], 0)
    f = PointFrame(np.array([[10.0, 0, 0], [3.0, 0, 0], [0.5, -2.9, 1]]))
    out = crop_search_region(f, box, margin=2.0)
    assert out.coords.tolist() == [[3.0, 0, 0], [0.5, -2.9, 1]]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 5.0))
def test_crop_matches_predicate(seed, margin):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-10, 10, (200, 3))
    box = Box3D(rng.uniform(-3, 3, 3), rng.uniform(0.5, 4, 3), rng.uniform(-3, 3))
    out, keep = crop_search_region(PointFrame(pts), box, margin, return_index=True)
    half = max(box.size) / 2 + margin
    expect = [p - box.center for p in pts if max(abs(p - box.center)) <= half]
    np.testing.assert_array_equal(out.coords, np.array(expect).reshape(-1, 3))
    # multiset subset of the input before re-centering
    assert len(set(keep.tolist())) == len(keep)


def test_resample_contracts():
    f2 = PointFrame(np.array([[0.0, 0, 0], [1.0, 1, 1]]))
    out = resample_points(f2, 4, seed=0)
    assert len(out) == 4
    assert all(any(np.array_equal(p, q) for q in f2.coords) for p in out.coords)

    f10 = PointFrame(np.arange(30, dtype=float).reshape(10, 3))
    out, idx = resample_points(f10, 4, seed=1, return_index=True)
    assert len(set(idx.tolist())) == 4
    assert not out.feats[:, -1].any()

    empty = resample_points(PointFrame(np.zeros((0, 3))), 4, seed=0)
    assert np.array_equal(empty.coords, np.zeros((4, 3)))
    assert empty.feats[:, -1].all()

    with pytest.raises(ValueError):
        resample_points(f10, 0)


def test_resample_deterministic():
    f = PointFrame(np.random.default_rng(0).normal(size=(50, 3)))
    a = resample_points(f, 20, seed=7)
    b = resample_points(f, 20, seed=7)
    assert np.array_equal(a.coords, b.coords)


def test_sequence_sample_invariants():
    f = PointFrame(np.zeros((1, 3)))
    b = Box3D([0, 0, 0], [1, 1, 1])
    with pytest.raises(ValueError):
        SequenceSample([f], [b])
    with pytest.raises(ValueError):
        SequenceSample([f, f], [b])


def test_meta_json_contents(tmp_path):
    s = generate_synthetic_sequence(ScenarioConfig(seed=4, L=3))
    write_sequence_dir(s, tmp_path)
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["num_frames"] == 3
    np.testing.assert_allclose(meta["target_size"], s.target_size)
