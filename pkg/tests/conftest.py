import numpy as np
import pytest
import torch

from gacvid.core_types import N_POINTS, NetConfig, Pose, TrainingConfig
from gacvid.toy_data import random_clip_spec, synth_clip

torch.set_num_threads(max(1, torch.get_num_threads()))


def random_pose(rng: np.random.Generator, frame_size=(128, 96), margin=4.0) -> Pose:
    h, w = frame_size
    xy = np.column_stack([rng.uniform(margin, w - margin, N_POINTS), rng.uniform(margin, h - margin, N_POINTS)])
    return Pose.from_xy(xy, frame_size)


@pytest.fixture(scope="session")
def small_clip():
    return synth_clip(random_clip_spec(5, 8, (64, 48), "person_000"), "clip_a")


@pytest.fixture(scope="session")
def small_clip_other():
    return synth_clip(random_clip_spec(6, 8, (64, 48), "person_001"), "clip_b")


@pytest.fixture(scope="session")
def clip_48():
    return synth_clip(random_clip_spec(3, 48, (128, 96), "person_000"), "clip_full")


@pytest.fixture
def tiny_net():
    return NetConfig(base_filters=8, n_downsamples=2, n_resblocks=1, max_filters=32, n_disc_scales=2,
                     n_disc_layers=2, n_temporal_scales=2, ac_patch=16)


@pytest.fixture
def tiny_cfg(tiny_net):
    return TrainingConfig(batch_size=2, max_steps=3, frame_size=(64, 48), temporal_strides=(1, 2), net=tiny_net)


# -- acceptance summary --------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.module.__name__ != "test_acceptance" or not item.name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _ACCEPTANCE[item.name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[name]
        label = name.removeprefix("test_criterion_").replace("_", " ", 1)
        terminalreporter.write_line(f"{status} criterion {label}" + (f" ({detail})" if detail else ""))
