import numpy as np
import pytest
import torch

from gacvid.core_types import NetConfig
from gacvid.errors import ConfigError, FormatError, MissingCheckpoint, ShapeMismatch
from gacvid.networks import (
    APPEARANCE_FG_CHANNELS,
    LAYOUT_COND_CHANNELS,
    MOTION_CHANNELS,
    build_appearance_generator,
    build_discriminator,
    build_layout_generator,
    build_temporal_discriminator,
    count_parameters,
    load_state,
    load_tensors,
    save_tensors,
    state_tensors,
)

TINY = NetConfig(base_filters=8, n_downsamples=2, n_resblocks=1, max_filters=32, n_disc_scales=2,
                 n_disc_layers=3, n_temporal_scales=3, ac_patch=16)


def test_channel_bookkeeping():
    assert LAYOUT_COND_CHANNELS == 54
    assert MOTION_CHANNELS == 34
    assert APPEARANCE_FG_CHANNELS == 9


def test_layout_generator_shapes():
    g = build_layout_generator(TINY, (16, 16), seed=0)
    out = g(torch.rand(2, 162, 16, 16), torch.rand(2, 26, 16, 16))
    assert out.shape == (2, 13, 16, 16)


def test_appearance_generator_ranges():
    a = build_appearance_generator(TINY, (16, 16), seed=0)
    with torch.no_grad():
        fg, shadow = a(torch.rand(1, 27, 16, 16), torch.rand(1, 102, 16, 16), torch.rand(1, 6, 16, 16))
    assert fg.shape == (1, 3, 16, 16) and shadow.shape == (1, 1, 16, 16)
    assert 0 <= float(fg.min()) and float(fg.max()) <= 1
    assert 0 < float(shadow.min()) and float(shadow.max()) < 1


def test_shadow_ignores_appearance_input():
    a = build_appearance_generator(TINY, (16, 16), seed=1).double()
    x1 = torch.rand(1, 27, 16, 16, dtype=torch.float64)
    x2 = torch.rand(1, 102, 16, 16, dtype=torch.float64)
    x3 = torch.rand(1, 6, 16, 16, dtype=torch.float64)
    _, s0 = a(x1, x2, x3)
    fg1, s1 = a(torch.rand_like(x1), x2, x3)
    assert torch.equal(s0, s1)
    x1.requires_grad_(True)
    _, s = a(x1, x2, x3)
    assert not s.requires_grad or torch.autograd.grad(s.sum(), x1, allow_unused=True)[0] is None


def test_generator_rejects_indivisible_frames():
    g = build_layout_generator(TINY, seed=0)
    with pytest.raises(ShapeMismatch):
        g(torch.rand(1, 162, 18, 16), torch.rand(1, 26, 18, 16))
    with pytest.raises(ConfigError):
        build_layout_generator(TINY, (18, 16))


def test_discriminator_scales_and_errors():
    d = build_discriminator(5, TINY, seed=0)
    out = d(torch.rand(1, 5, 16, 16))
    assert len(out) == 2 and all(len(feats) == 2 for _, feats in out)
    assert out[1][0].shape[-1] < out[0][0].shape[-1]
    with pytest.raises(ShapeMismatch):
        d(torch.rand(1, 4, 16, 16))
    with pytest.raises(ShapeMismatch):
        d(torch.rand(1, 5, 15, 16))


def test_temporal_discriminator_optional_scales():
    d = build_temporal_discriminator(13, TINY, seed=0)
    out = d([torch.rand(1, 39, 16, 16), None, torch.rand(1, 39, 16, 16)])
    assert out[1] is None and out[0] is not None and out[2] is not None
    with pytest.raises(ShapeMismatch):
        d([torch.rand(1, 38, 16, 16), None, None])


def test_seeded_init_is_deterministic():
    a = build_layout_generator(TINY, seed=3)
    b = build_layout_generator(TINY, seed=3)
    c = build_layout_generator(TINY, seed=4)
    pa, pb, pc = (torch.cat([p.flatten() for p in m.parameters()]) for m in (a, b, c))
    assert torch.equal(pa, pb) and not torch.equal(pa, pc)


def test_default_parameter_counts():
    cfg = NetConfig()
    assert 5e6 < count_parameters(build_layout_generator(cfg)) < 8e6
    assert 9e6 < count_parameters(build_appearance_generator(cfg)) < 14e6


def test_checkpoint_round_trip(tmp_path):
    g = build_layout_generator(TINY, seed=5)
    save_tensors(tmp_path / "p.bin", state_tensors(g, "G."), {"note": "x"})
    tensors, cfg = load_tensors(tmp_path / "p.bin")
    assert cfg == {"note": "x"}
    h = build_layout_generator(TINY, seed=6)
    load_state(h, tensors, "G.")
    for (k, v), (_, w) in zip(g.state_dict().items(), h.state_dict().items()):
        assert torch.equal(v, w), k


def test_checkpoint_errors(tmp_path):
    with pytest.raises(MissingCheckpoint):
        load_tensors(tmp_path / "none.bin")
    (tmp_path / "bad.bin").write_bytes(b"x" * 32)
    with pytest.raises(FormatError):
        load_tensors(tmp_path / "bad.bin")
    g = build_layout_generator(TINY, seed=0)
    bigger = build_layout_generator(NetConfig(base_filters=16, n_downsamples=2, n_resblocks=1, max_filters=32), seed=0)
    with pytest.raises(FormatError):
        load_state(g, state_tensors(bigger, "G."), "G.")
    with pytest.raises(FormatError):
        load_state(g, {}, "G.")


def test_checkpoint_is_little_endian_float32(tmp_path):
    save_tensors(tmp_path / "p.bin", {"a": np.array([1.5, -2.0])}, {})
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:8] == b"GACCKPT\x00"
    assert raw[-8:] == np.array([1.5, -2.0], dtype="<f4").tobytes()
