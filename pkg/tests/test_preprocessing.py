import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gacvid.core_types import PART_CHANNEL_SLICES, PARTS, BodyPart, FrameRecord, Pose
from gacvid.errors import EmptyLibrary, FormatError, ShapeMismatch
from gacvid.pose_geometry import part_centroid
from gacvid.preprocessing import (
    AppearanceLibrary,
    assemble_condition,
    build_library,
    condition_for_pose,
    load_conditions,
    make_condition_record,
    make_part_condition,
    normalize_selected,
    rasterize_pose,
    save_conditions,
    select_part_condition,
)
from gacvid.toy_data import split_clip

from conftest import random_pose


def _frame(pose: Pose, k: int) -> FrameRecord:
    h, w = pose.frame_size
    return FrameRecord(k, np.zeros((h, w, 3), np.uint8), pose, np.zeros((h, w), np.uint8), None, "s")


def test_selection_prefers_identical_pose():
    rng = np.random.default_rng(0)
    poses = [random_pose(rng) for _ in range(10)]
    lib = [make_part_condition(_frame(p, k), BodyPart.UPPER) for k, p in enumerate(poses)]
    assert select_part_condition(poses[6], lib, BodyPart.UPPER) == 6


def test_selection_tie_goes_to_lowest_frame_id():
    rng = np.random.default_rng(1)
    p = random_pose(rng)
    lib = [make_part_condition(_frame(p, k), BodyPart.HEAD) for k in (9, 3, 5)]
    assert select_part_condition(p, lib, BodyPart.HEAD) == 1


def test_empty_library():
    with pytest.raises(EmptyLibrary):
        select_part_condition(random_pose(np.random.default_rng(0)), [], BodyPart.HEAD)
    vis = np.ones(21, bool)
    vis[0] = False
    with pytest.raises(EmptyLibrary):
        build_library([_frame(Pose(np.ones((21, 2)), vis, (64, 48)), 0)], BodyPart.HEAD)


def test_library_skips_frames_with_missing_joints(small_clip):
    frames = split_clip(small_clip)[1]
    vis = np.ones(21, bool)
    vis[14] = False
    broken = FrameRecord(99, frames[0].image, Pose(frames[0].pose.xy, vis, (64, 48)), frames[0].layout)
    lib = build_library(frames + [broken], BodyPart.LOWER)
    assert [e.frame_id for e in lib] == [4, 5, 6, 7]
    assert len(build_library(frames + [broken], BodyPart.HEAD)) == 5


@given(st.integers(0, 2**31), st.sampled_from(PARTS))
@settings(max_examples=25, deadline=None)
def test_normalized_centroid_matches_source(seed, part):
    rng = np.random.default_rng(seed)
    src, tgt = random_pose(rng), random_pose(rng)
    entry = make_part_condition(_frame(tgt, 0), part)
    norm = normalize_selected(src, entry, part)
    np.testing.assert_allclose(part_centroid(norm.pose, part), part_centroid(src, part), atol=1e-9)


def test_condition_channels_disjoint(small_clip):
    motion, appearance = split_clip(small_clip)
    lib = AppearanceLibrary.from_frames(appearance)
    cond, chosen = condition_for_pose(motion[1].pose, lib)
    assert cond.layout.shape == (64, 48, 12)
    assert cond.foreground.shape == (64, 48, 9)
    assert cond.layout.sum(axis=-1).max() <= 3
    for part in PARTS:
        sl = PART_CHANNEL_SLICES[part]
        assert cond.layout[..., sl].sum(axis=-1).max() <= 1
    assert set(chosen) == set(PARTS)
    assert cond.foreground.min() >= 0 and cond.foreground.max() <= 1


def test_assemble_rejects_mismatched_sizes(small_clip):
    motion, appearance = split_clip(small_clip)
    parts = {p: make_part_condition(appearance[0], p) for p in PARTS}
    wrong = Pose.from_xy(motion[0].pose.xy, (128, 96))
    with pytest.raises(ShapeMismatch):
        assemble_condition(wrong, parts)


def test_rasterize_pose_peaks_at_joints():
    pose = Pose.from_xy(np.tile([[10.0, 20.0]], (21, 1)), (32, 32))
    heat = rasterize_pose(pose, 3.0)
    assert heat.shape == (32, 32, 21)
    assert heat[20, 10, 0] == 1.0
    assert heat[20, 13, 0] == pytest.approx(np.exp(-0.5))


def test_condition_record_round_trip(tmp_path, small_clip):
    motion, appearance = split_clip(small_clip)
    lib = AppearanceLibrary.from_frames(appearance, "person_000")
    recs = [make_condition_record(f.frame_id, f.pose, lib) for f in motion]
    save_conditions(recs, tmp_path, {"clip": "a"})
    again, meta = load_conditions(tmp_path)
    assert meta == {"clip": "a"}
    for a, b in zip(recs, again):
        assert a.selected == b.selected and a.sources == b.sources
        for name in ("source_pose", "target_pose", "layout", "foreground"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    (tmp_path / "index.json").write_text('{"version": 9}')
    with pytest.raises(FormatError):
        load_conditions(tmp_path)
