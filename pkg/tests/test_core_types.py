import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gacvid.core_types import (
    CLASS_NAMES,
    N_CLASSES,
    PART_CHANNEL_SLICES,
    PARTS,
    BodyPart,
    NetConfig,
    Pose,
    TrainingConfig,
    layout_to_part_tensor,
    part_of_class,
    part_tensor_to_layout,
    validate_pose,
)
from gacvid.errors import ConfigError


def test_class_table():
    assert len(CLASS_NAMES) == N_CLASSES == 13
    assert part_of_class(0) is None
    assert part_of_class(2) is BodyPart.HEAD
    assert part_of_class(6) is BodyPart.UPPER
    assert part_of_class(12) is BodyPart.LOWER


def test_part_tables():
    assert len(BodyPart.HEAD.vector_table) == 5
    assert len(BodyPart.UPPER.vector_table) == 7
    assert len(BodyPart.LOWER.vector_table) == 8
    assert [len(p.point_set) for p in PARTS] == [6, 8, 9]
    classes = sorted(c for p in PARTS for c in p.classes)
    assert classes == list(range(1, 13))
    owned = sorted(k for p in PARTS for k in p.owned_points)
    assert owned == list(range(21))


def test_pose_json_round_trip():
    rng = np.random.default_rng(0)
    vis = rng.random(21) > 0.2
    pose = Pose(rng.uniform(0, 60, (21, 2)), vis, (64, 48))
    again = Pose.from_json(json.loads(json.dumps(pose.to_json())))
    assert again == pose
    assert hash(again) == hash(pose)
    assert np.all(again.xy[~vis] == 0)


def test_pose_is_immutable():
    pose = Pose.from_xy(np.zeros((21, 2)), (10, 10))
    with pytest.raises(ValueError):
        pose.xy[0, 0] = 1.0


def test_validate_pose_messages():
    xy = np.full((21, 2), 5.0)
    xy[4] = (70.0, 5.0)
    problems = validate_pose(Pose.from_xy(xy, (64, 48)))
    assert len(problems) == 1 and problems[0].startswith("P4: x=70")
    assert validate_pose(Pose.from_xy(np.ones((20, 2)), (8, 8)))[0].startswith("count≠21")


@given(st.lists(st.integers(0, 12), min_size=12, max_size=12))
def test_part_tensor_round_trip(values):
    layout = np.array(values, dtype=np.uint8).reshape(3, 4)
    t = layout_to_part_tensor(layout)
    assert t.shape == (3, 4, 12)
    assert t.sum(axis=-1).max() <= 1
    np.testing.assert_array_equal(part_tensor_to_layout(t), layout)
    for part in PARTS:
        sl = PART_CHANNEL_SLICES[part]
        assert t[..., sl].shape[-1] == len(part.classes)


def test_training_config_round_trip():
    cfg = TrainingConfig(lambda_ac=2.5, net=NetConfig(base_filters=16))
    again = TrainingConfig.from_json(json.loads(cfg.dumps()))
    assert again == cfg


def test_training_config_defaults():
    cfg = TrainingConfig()
    assert cfg.learning_rate == 2e-4 and (cfg.beta1, cfg.beta2) == (0.5, 0.999)
    assert cfg.batch_size == 4 and cfg.epochs == 10
    assert cfg.lambda_ac == 5 and cfg.lambda_ss == cfg.lambda_t == cfg.lambda_fm == cfg.lambda_vgg == 10


@pytest.mark.parametrize("obj", [
    {"learning_rate": 1e-3},
    {"version": 1, "lambda_acc": 5.0},
    {"version": 1, "net": {"filters": 3}},
    {"version": 2},
    {"version": 1, "lambda_t": -1.0},
    {"version": 1, "frame_size": [100, 96]},
])
def test_training_config_rejects(obj):
    with pytest.raises(ConfigError):
        TrainingConfig.from_json(obj)
