import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gacvid.core_types import NetConfig, TrainingConfig
from gacvid.errors import NonFinite, ShapeMismatch
from gacvid.losses import (
    FixedFeatureExtractor,
    LossReport,
    adversarial_loss,
    appearance_consistency_from_logits,
    appearance_consistency_loss,
    feature_matching_loss,
    joint_structure_loss,
    perceptual_loss,
    pixel_softmax_loss,
    region_centers,
    structural_sensitive_loss,
    temporal_gan_loss,
    total_appearance_objective,
    total_layout_objective,
)
from gacvid.networks import build_discriminator, build_temporal_discriminator

from grad_cases import GRAD_CASES
from oracles import central_difference_check

LN_HALF = math.log(0.5)
TINY = NetConfig(base_filters=8, n_downsamples=2, n_resblocks=1, max_filters=16, n_disc_scales=3,
                 n_disc_layers=4, n_temporal_scales=2, ac_patch=16)


def shifted_layouts():
    """Nine single-pixel regions; region of class 3 moves 4 of 8 columns (0.5 normalised)."""
    real = torch.zeros(1, 9, 9, dtype=torch.long)
    for row, cls in enumerate((1, 3, 5, 6, 7, 8, 9, 10, 11)):
        real[0, row, 0] = cls
    fake = real.clone()
    fake[0, 1, 0] = 0
    fake[0, 1, 4] = 3
    return real, fake


def test_closed_form_values():
    zeros = torch.zeros(2, 1, 5, 5, dtype=torch.float64)
    assert abs(float(adversarial_loss(zeros, zeros, "D")) - 2 * LN_HALF) <= 1e-9
    assert abs(float(adversarial_loss(None, zeros, "G")) - LN_HALF) <= 1e-9
    assert abs(float(appearance_consistency_from_logits(zeros, zeros, zeros, "D")) - 3 * LN_HALF) <= 1e-9
    logits = torch.zeros(2, 13, 4, 4, dtype=torch.float64)
    labels = torch.randint(0, 13, (2, 4, 4))
    assert abs(float(pixel_softmax_loss(logits, labels)) - math.log(13)) <= 1e-9
    real, fake = shifted_layouts()
    assert abs(float(joint_structure_loss(real, fake)) - 0.25 / 18) <= 1e-9


def test_weighted_totals():
    cfg = TrainingConfig()
    ones_lo = dict.fromkeys(("gan_lo", "ss", "t_lo", "fm_lo"), 1.0)
    assert total_layout_objective(ones_lo, cfg) == 31.0
    ones_a = dict.fromkeys(("gan_h", "ac_h", "gan_u", "ac_u", "gan_l", "ac_l", "gan_s", "t_a", "fm_a", "vgg"), 1.0)
    # three parts of (1 + 5) plus the scene term plus 10 * (t + fm + vgg)
    assert total_appearance_objective(ones_a, cfg) == 3 * 6 + 1 + 30 == 49.0


def test_totals_reject_non_finite():
    parts = {"gan_lo": float("nan"), "ss": 0.0, "t_lo": 0.0, "fm_lo": 0.0}
    with pytest.raises(NonFinite):
        total_layout_objective(parts, TrainingConfig())


def test_adversarial_accepts_multiscale_outputs():
    d = build_discriminator(3, TINY, seed=0)
    x = torch.rand(1, 3, 16, 16)
    out = d(x)
    assert len(out) == 3
    v = adversarial_loss(out, out, "D")
    assert v.ndim == 0 and float(v.detach()) < 0


@given(st.floats(-30, 30), st.floats(-30, 30))
def test_adversarial_objective_bounds(a, b):
    r = torch.full((1, 1, 2, 2), a, dtype=torch.float64)
    f = torch.full((1, 1, 2, 2), b, dtype=torch.float64)
    v = float(adversarial_loss(r, f, "D"))
    assert math.isfinite(v)
    assert 2 * math.log(1e-7) - 1e-9 <= v <= 0.0


def test_adversarial_bad_side():
    with pytest.raises(ValueError):
        adversarial_loss(torch.zeros(1), torch.zeros(1), "X")


def test_region_centers_presence():
    lay = torch.zeros(1, 5, 5, dtype=torch.long)
    lay[0, 2, 3] = 2
    c, present = region_centers(lay)
    assert present[0].tolist() == [True] + [False] * 8
    assert c[0, 0].tolist() == [0.75, 0.5]


def test_joint_loss_skips_missing_regions():
    real, fake = shifted_layouts()
    fake2 = fake.clone()
    fake2[fake2 == 1] = 0
    # region 1 now missing in the fake map: 8 shared regions, same shift
    assert float(joint_structure_loss(real, fake2)) == pytest.approx(0.25 / 16)
    empty = torch.zeros_like(real)
    assert float(joint_structure_loss(real, empty)) == 0.0


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_joint_loss_symmetric_and_zero_on_self(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randint(0, 13, (2, 8, 8), generator=g)
    b = torch.randint(0, 13, (2, 8, 8), generator=g)
    assert float(joint_structure_loss(a, a)) == 0.0
    assert float(joint_structure_loss(a, b)) == pytest.approx(float(joint_structure_loss(b, a)))


def test_structural_loss_zero_for_perfect_structure():
    labels = torch.randint(0, 13, (1, 8, 8))
    logits = torch.nn.functional.one_hot(labels, 13).permute(0, 3, 1, 2).double() * 5
    assert float(structural_sensitive_loss(logits, labels)) == 0.0


def test_ac_shape_mismatch():
    d = build_discriminator(6, TINY, seed=0)
    with pytest.raises(ShapeMismatch):
        appearance_consistency_loss(d, torch.rand(1, 6, 16, 16), torch.rand(1, 6, 16, 16),
                                    torch.rand(1, 6, 32, 16), "D")


def test_temporal_skips_missing_scales():
    dt = build_temporal_discriminator(3, TINY, seed=0)
    seq = torch.rand(1, 9, 16, 16)
    v = temporal_gan_loss(dt, [seq, None], [seq, None], "D")
    assert math.isfinite(float(v.detach()))
    with pytest.raises(ShapeMismatch):
        temporal_gan_loss(dt, [None, None], [None, None], "G")


def test_feature_matching_zero_on_equal_and_mismatch():
    d = build_discriminator(3, TINY, seed=1)
    x = torch.rand(1, 3, 16, 16)
    assert float(feature_matching_loss(d(x), d(x)).detach()) == 0.0
    with pytest.raises(ShapeMismatch):
        feature_matching_loss(d(x), d(x)[:2])


def test_perceptual_extractor_is_fixed():
    a, b = FixedFeatureExtractor(seed=3), FixedFeatureExtractor(seed=3)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q) and not p.requires_grad
    x = torch.rand(1, 3, 32, 32)
    assert float(perceptual_loss(x, x, a)) == 0.0
    assert float(perceptual_loss(x, torch.rand(1, 3, 32, 32), a)) > 0


def test_loss_report_json():
    parts = {"gan_lo": torch.tensor(0.5), "ss": 0.1, "t_lo": 0.0, "fm_lo": 0.2}
    rep = LossReport.from_parts(3, "layout", parts, TrainingConfig(), extra={"d_obj": -1.0})
    js = rep.to_json()
    assert js["step"] == 3 and js["L_LO"] == pytest.approx(0.5 + 1 + 2) and js["d_obj"] == -1.0


# -- gradients -----------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_central_differences(name):
    torch.manual_seed(0)
    fn, x = GRAD_CASES[name]()
    for ana, num, rel in central_difference_check(fn, x, n_coords=5):
        assert rel <= 1e-3, (name, ana, num)
