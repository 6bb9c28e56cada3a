"""End-to-end acceptance checks, one test per criterion.

A pass/fail line per criterion is printed in the terminal summary.
"""

import json
import time

import numpy as np
import pytest
import torch

from gacvid.core_types import PARTS, BodyPart, NetConfig, PartCondition, Pose, TrainingConfig
from gacvid.evaluation import psnr, ssim
from gacvid.inference import compose_scene, generate_video, render_shadowed_background
from gacvid.losses import (
    adversarial_loss,
    appearance_consistency_from_logits,
    joint_structure_loss,
    pixel_softmax_loss,
    total_appearance_objective,
    total_layout_objective,
)
from gacvid.networks import build_appearance_generator
from gacvid.pose_geometry import part_scale_translation, scale_pose_about, transform_pose
from gacvid.preprocessing import AppearanceLibrary, select_part_condition
from gacvid.toy_data import extract_background, random_clip_spec, split_clip, synth_clip
from gacvid.training import (
    AppearanceTrainer,
    LayoutTrainer,
    appearance_outputs,
    layout_accuracy,
    prepare_training_set,
)

from conftest import random_pose
from grad_cases import GRAD_CASES
from oracles import (
    HEAD_VECTORS,
    LOWER_VECTORS,
    UPPER_VECTORS,
    central_difference_check,
    naive_psnr,
    naive_select,
    naive_ssim,
)
from test_cli import run_pipeline
from test_losses import shifted_layouts

TABLES = {BodyPart.HEAD: HEAD_VECTORS, BodyPart.UPPER: UPPER_VECTORS, BodyPart.LOWER: LOWER_VECTORS}
LN_HALF = float(np.log(0.5))
FRAME = (32, 24)


def entry(pose: Pose, part: BodyPart, frame_id: int) -> PartCondition:
    """Library entry carrying only what selection looks at."""
    return PartCondition(part, pose, np.zeros((1, 1, len(part.classes))), np.zeros((1, 1, 3)), frame_id)


def random_library(rng, part, size, ties=True):
    poses = [random_pose(rng, FRAME) for _ in range(size)]
    if ties and size > 2:
        # exact duplicates and collapsed vectors exercise the tie-break and zero-length rules
        for _ in range(rng.integers(0, size // 4 + 1)):
            poses[rng.integers(size)] = poses[rng.integers(size)]
        if rng.random() < 0.5:
            k = rng.integers(size)
            xy = poses[k].xy.copy()
            xy[list(part.point_set)] = xy[part.point_set[0]]
            poses[k] = poses[k].replace_xy(xy)
    ids = [int(i) for i in rng.permutation(size * 3)[:size]]
    return [entry(p, part, i) for p, i in zip(poses, ids)]


def test_criterion_01_selection_oracle(record_property):
    rng = np.random.default_rng(101)
    elapsed, mismatches = 0.0, 0
    for _ in range(100):
        part = PARTS[rng.integers(len(PARTS))]
        lib = random_library(rng, part, int(rng.integers(1, 65)))
        query = random_pose(rng, FRAME)
        t0 = time.perf_counter()
        got = select_part_condition(query, lib, part)
        elapsed += time.perf_counter() - t0
        want = naive_select(query.xy.tolist(), [e.pose.xy.tolist() for e in lib], [e.frame_id for e in lib],
                            TABLES[part])
        mismatches += got != want
    record_property("detail", f"{mismatches} mismatches, {elapsed:.3f}s")
    assert mismatches == 0
    assert elapsed < 5.0


def test_criterion_02_normalization_round_trip(record_property):
    rng = np.random.default_rng(102)
    worst_scale = worst_shift = 0.0
    for _ in range(100):
        src, tgt = random_pose(rng, FRAME), random_pose(rng, FRAME)
        for part in PARTS:
            moved = transform_pose(tgt, part_scale_translation(src, tgt, part), part.point_set)
            again = part_scale_translation(src, moved, part)
            worst_scale = max(worst_scale, abs(again.scale - 1.0))
            worst_shift = max(worst_shift, float(np.hypot(*again.translation)))
    record_property("detail", f"max |s-1|={worst_scale:.1e}, max |t|={worst_shift:.1e}px")
    assert worst_scale <= 1e-6
    assert worst_shift <= 1e-6


def test_criterion_03_selection_scale_invariance(record_property):
    rng = np.random.default_rng(103)
    changed = 0
    for _ in range(100):
        part = PARTS[rng.integers(len(PARTS))]
        lib = random_library(rng, part, int(rng.integers(2, 65)), ties=False)
        query = random_pose(rng, FRAME)
        before = select_part_condition(query, lib, part)
        scaled = [entry(scale_pose_about(e.pose, float(rng.uniform(0.2, 5.0)), rng.uniform(-50, 50, 2)), part,
                        e.frame_id) for e in lib]
        changed += select_part_condition(query, scaled, part) != before
    record_property("detail", f"{changed} of 100 selections changed")
    assert changed == 0


def test_criterion_04_gradient_checks(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for name in sorted(GRAD_CASES):
        torch.manual_seed(0)
        fn, x = GRAD_CASES[name]()
        checks = central_difference_check(fn, x, n_coords=5)
        assert len(checks) >= 5
        worst = max(worst, max(rel for _, _, rel in checks))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{len(GRAD_CASES)} terms, max rel err {worst:.1e}, {elapsed:.1f}s")
    assert worst <= 1e-3
    assert elapsed < 60.0


def test_criterion_05_closed_forms(record_property):
    zeros = torch.zeros(2, 1, 5, 5, dtype=torch.float64)
    adv = float(adversarial_loss(zeros, zeros, "D"))
    ac = float(appearance_consistency_from_logits(zeros, zeros, zeros, "D"))
    labels = torch.randint(0, 13, (2, 4, 4), generator=torch.Generator().manual_seed(0))
    pix = float(pixel_softmax_loss(torch.zeros(2, 13, 4, 4, dtype=torch.float64), labels))
    joint = float(joint_structure_loss(*shifted_layouts()))
    cfg = TrainingConfig()
    lo = total_layout_objective(dict.fromkeys(("gan_lo", "ss", "t_lo", "fm_lo"), 1.0), cfg)
    app_keys = ("gan_h", "ac_h", "gan_u", "ac_u", "gan_l", "ac_l", "gan_s", "t_a", "fm_a", "vgg")
    app = total_appearance_objective(dict.fromkeys(app_keys, 1.0), cfg)
    # three parts of (1 + lambda_ac) plus the scene term plus the weighted temporal, FM and perceptual terms
    app_expected = 3 * (1 + cfg.lambda_ac) + 1 + cfg.lambda_t + cfg.lambda_fm + cfg.lambda_vgg
    record_property("detail", f"L_LO={lo}, L_A={app}")
    assert abs(adv - 2 * LN_HALF) <= 1e-9
    assert abs(ac - 3 * LN_HALF) <= 1e-9
    assert abs(pix - np.log(13)) <= 1e-9
    assert abs(joint - 0.25 / 18) <= 1e-9
    assert lo == 31.0
    assert app == app_expected == 49.0


def test_criterion_06_shadow_isolation(record_property):
    net = NetConfig(base_filters=8, n_downsamples=2, n_resblocks=1, max_filters=32)
    gen = build_appearance_generator(net, (16, 16), seed=4).double().eval()
    g = torch.Generator().manual_seed(6)
    x1 = torch.rand(1, 27, 16, 16, generator=g, dtype=torch.float64)
    x2 = torch.rand(1, 102, 16, 16, generator=g, dtype=torch.float64)
    x3 = torch.rand(1, 6, 16, 16, generator=g, dtype=torch.float64)
    eps = 1e-6
    worst = 0.0
    with torch.no_grad():
        for idx in np.random.default_rng(6).choice(x1.numel(), size=3, replace=False):
            xp, xm = x1.clone().view(-1), x1.clone().view(-1)
            xp[idx] += eps
            xm[idx] -= eps
            sp = gen(xp.view_as(x1), x2, x3)[1]
            sm = gen(xm.view_as(x1), x2, x3)[1]
            worst = max(worst, float(((sp - sm) / (2 * eps)).abs().max()))
    record_property("detail", f"max sensitivity {worst:.1e}")
    assert worst < 1e-12


@pytest.fixture(scope="module")
def tiny_checkpoints(tmp_path_factory, small_clip, small_clip_other):
    net = NetConfig(base_filters=8, n_downsamples=2, n_resblocks=1, max_filters=32, n_disc_scales=2,
                    n_disc_layers=2, n_temporal_scales=2, ac_patch=16)
    cfg = TrainingConfig(batch_size=1, frame_size=(64, 48), temporal_strides=(1, 2), net=net)
    clips = prepare_training_set([small_clip, small_clip_other], cfg)
    root = tmp_path_factory.mktemp("acc_ckpt")
    lt = LayoutTrainer(clips, cfg)
    lt.run(2)
    at = AppearanceTrainer(clips, cfg)
    at.run(2)
    return lt.save(root), at.save(root)


def test_criterion_07_background_invariance(record_property, tmp_path, tiny_checkpoints, small_clip):
    motion, appearance = split_clip(small_clip)
    lib = AppearanceLibrary.from_frames(appearance)
    poses = [f.pose for f in motion]
    bg_a = small_clip.background
    bg_b = np.random.default_rng(7).integers(0, 256, bg_a.shape, dtype=np.uint8)
    generate_video(poses, lib, bg_a, *tiny_checkpoints, tmp_path / "a")
    generate_video(poses, lib, bg_b, *tiny_checkpoints, tmp_path / "b")
    compared = differing = 0
    for pattern in ("foreground_*.png", "shadow_*.raw", "layout_*.png"):
        files = sorted((tmp_path / "a").glob(pattern))
        assert len(files) == len(poses)
        for f in files:
            compared += 1
            differing += f.read_bytes() != (tmp_path / "b" / f.name).read_bytes()
    frames_differ = any((tmp_path / "a" / f.name).read_bytes() != f.read_bytes()
                        for f in sorted((tmp_path / "b").glob("frame_*.png")))
    record_property("detail", f"{differing} of {compared} files differ")
    assert differing == 0
    assert frames_differ  # the background actually reached the composite


def test_criterion_08_compositing_identity(record_property):
    worst_px = worst_bg = 0.0
    for seed in range(3):
        clip = synth_clip(random_clip_spec(20 + seed, 48, (128, 96)))
        bg = extract_background(clip)
        worst_bg = max(worst_bg, float(np.abs(bg / 255.0 - clip.background / 255.0).mean()))
        shaded_bg = bg / 255.0
        for f in clip.frames:
            mask = (f.layout > 0).astype(np.float64)
            fg = f.image / 255.0 * mask[..., None]
            out = compose_scene(fg, mask, render_shadowed_background(shaded_bg, f.shadow))
            worst_px = max(worst_px, float(np.abs(out - f.image / 255.0).max()))
    record_property("detail", f"max pixel err {worst_px * 255:.2f}/255, bg MAE {worst_bg * 255:.3f}/255")
    assert worst_px <= 1 / 255 + 1e-12
    assert worst_bg <= 2 / 255


@pytest.mark.slow
def test_criterion_09_overfit_smoke(record_property):
    t0 = time.perf_counter()
    clip = synth_clip(random_clip_spec(0, 8, (128, 96), "person_000"), "overfit")
    partner = synth_clip(random_clip_spec(1, 8, (128, 96), "person_001"), "partner")
    cfg = TrainingConfig(batch_size=1, seed=0)
    prepared = prepare_training_set([clip, partner], cfg)
    train, pool = prepared[:1], prepared[1:]  # the partner only supplies cross-person AC pairs
    lt = LayoutTrainer(train, cfg)
    lt.run(200)
    acc = layout_accuracy(lt.G, train)
    at = AppearanceTrainer(train, cfg, pair_pool=pool)
    at.run(300)
    _, _, img, _ = appearance_outputs(at.G, train[0])
    score = float(np.mean([ssim(img[i].permute(1, 2, 0).numpy(), train[0].image[i].permute(1, 2, 0).numpy())
                           for i in range(img.shape[0])]))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"pixel acc {acc:.3f}, SSIM {score:.3f}, {elapsed / 60:.1f} min")
    assert acc >= 0.90
    assert score >= 0.6
    assert elapsed <= 15 * 60


def test_criterion_10_metric_oracles(record_property):
    rng = np.random.default_rng(110)
    worst_ssim = worst_psnr = 0.0
    for _ in range(20):
        h, w = rng.integers(11, 24, 2)
        a = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        b = np.clip(a.astype(int) + rng.integers(-60, 61, a.shape), 0, 255).astype(np.uint8)
        worst_ssim = max(worst_ssim, abs(ssim(a, b) - naive_ssim(a, b)))
        worst_psnr = max(worst_psnr, abs(psnr(a, b) - naive_psnr(a, b)))
    same = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    record_property("detail", f"max |dSSIM|={worst_ssim:.1e}, max |dPSNR|={worst_psnr:.1e}")
    assert worst_ssim <= 1e-6
    assert worst_psnr <= 1e-6
    assert ssim(same, same) == pytest.approx(1.0, abs=1e-12)
    assert psnr(same, same) == 100.0


def test_criterion_11_determinism(record_property, tmp_path, monkeypatch):
    outputs = []
    for run in ("one", "two"):
        root = tmp_path / run
        root.mkdir()
        monkeypatch.setenv("GACVID_CACHE", str(root / "cache"))
        assert run_pipeline(root, seed=11) == [0] * 6
        gen = root / "gen"
        files = sorted(p.relative_to(gen) for p in gen.rglob("*") if p.name.startswith("frame_")
                       or p.name == "report.json")
        outputs.append({str(p): (gen / p).read_bytes() for p in files})
    a, b = outputs
    n_frames = sum(1 for k in a if "frame_" in k)
    differing = [k for k in a if a[k] != b.get(k)]
    record_property("detail", f"{n_frames} frames + reports compared, {len(differing)} differ")
    assert a.keys() == b.keys() and n_frames > 0
    assert "report.json" in a
    assert json.loads(a["report.json"])["n_clips"] >= 1
    assert not differing
