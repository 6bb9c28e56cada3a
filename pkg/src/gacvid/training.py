"""Two-stage adversarial training: layout GAN, then appearance GAN.

Each batch slot walks through one clip frame by frame. The generator output
for frame ``t`` is detached and kept as history, so the next step of that
slot sees real recurrent inputs; a slot that reaches the end of its clip
restarts on a freshly drawn clip with empty (zero) history.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import (
    N_CLASSES,
    PART_CHANNEL_SLICES,
    PART_RGB_SLICES,
    PARTS,
    BodyPart,
    TrainingConfig,
)
from .errors import InsufficientPersons, MissingCheckpoint, NonFiniteLoss, WindowTooShort
from .inference import (
    appearance_rollout,
    compose_scene,
    condition_tensors,
    history,
    layout_rollout,
    load_layout_generator,
    onehot,
    render_shadowed_background,
    to_chw,
    window,
)
from .losses import (
    FixedFeatureExtractor,
    LossReport,
    adversarial_loss,
    appearance_consistency_loss,
    feature_matching_loss,
    perceptual_loss,
    structural_sensitive_loss,
    temporal_gan_loss,
    total_appearance_objective,
    total_layout_objective,
)
from .networks import (
    APPEARANCE_FG_CHANNELS,
    LAYOUT_COND_CHANNELS,
    MOTION_CHANNELS,
    build_appearance_generator,
    build_discriminator,
    build_layout_generator,
    build_temporal_discriminator,
    load_state,
    load_tensors,
    save_tensors,
    state_tensors,
)
from .preprocessing import AppearanceLibrary, ConditionRecord, make_condition_record
from .toy_data import ClipRecord, extract_background, split_clip

log = logging.getLogger(__name__)

PART_KEYS = {BodyPart.HEAD: "h", BodyPart.UPPER: "u", BodyPart.LOWER: "l"}


# -- data --------------------------------------------------------------------

def part_bbox(mask: torch.Tensor, margin: int = 2) -> tuple[int, int, int, int]:
    """(y0, y1, x0, x1) bounding box of a boolean H x W mask; full frame when empty."""
    h, w = mask.shape
    ys = torch.nonzero(mask.any(dim=1)).flatten()
    xs = torch.nonzero(mask.any(dim=0)).flatten()
    if len(ys) == 0:
        return 0, h, 0, w
    return (max(int(ys[0]) - margin, 0), min(int(ys[-1]) + 1 + margin, h),
            max(int(xs[0]) - margin, 0), min(int(xs[-1]) + 1 + margin, w))


def crop_resize(x: torch.Tensor, box, size: int) -> torch.Tensor:
    y0, y1, x0, x1 = box
    return F.interpolate(x[None, :, y0:y1, x0:x1], size=(size, size), mode="bilinear", align_corners=False)[0]


def part_crop(image: torch.Tensor, labels: torch.Tensor, part: BodyPart, size: int) -> torch.Tensor:
    """Masked part foreground cropped to its bounding box and resized."""
    m = torch.zeros_like(labels, dtype=torch.bool)
    for c in part.classes:
        m |= labels == c
    return crop_resize(image * m[None].to(image.dtype), part_bbox(m), size)


@dataclass(eq=False)
class TrainClip:
    """Tensors for one clip's motion half plus part crops of every frame."""

    name: str
    person: str
    labels: torch.Tensor  # T x H x W
    onehot: torch.Tensor  # T x 13 x H x W
    image: torch.Tensor  # T x 3 x H x W
    cond: dict[str, torch.Tensor]
    background: torch.Tensor  # 3 x H x W
    records: list[ConditionRecord]
    crops: dict[BodyPart, torch.Tensor]  # N_all x 3 x P x P
    layout_src: torch.Tensor | None = None

    @property
    def n_frames(self) -> int:
        return self.labels.shape[0]


def prepare_clip(clip: ClipRecord, sigma: float = 3.0, patch: int = 48,
                 records: Sequence[ConditionRecord] | None = None) -> TrainClip:
    """Split a clip, build its appearance library and condition tensors."""
    motion, appearance = split_clip(clip)
    if records is None:
        library = AppearanceLibrary.from_frames(appearance, clip.person)
        records = [make_condition_record(f.frame_id, f.pose, library, sigma) for f in motion]
    labels = torch.from_numpy(np.stack([f.layout for f in motion]).astype(np.int64))
    image = torch.stack([to_chw(f.image.astype(np.float32) / 255.0) for f in motion])
    bg = to_chw(extract_background(clip).astype(np.float32) / 255.0)
    crops = {}
    for part in PARTS:
        crops[part] = torch.stack([
            part_crop(to_chw(f.image.astype(np.float32) / 255.0),
                      torch.from_numpy(f.layout.astype(np.int64)), part, patch)
            for f in clip.frames
        ])
    return TrainClip(
        name=clip.name,
        person=clip.person,
        labels=labels,
        onehot=onehot(labels),
        image=image,
        cond=condition_tensors(records),
        background=bg,
        records=list(records),
        crops=crops,
    )


def prepare_training_set(clips: Sequence[ClipRecord], cfg: TrainingConfig,
                         records: dict[str, Sequence[ConditionRecord]] | None = None) -> list[TrainClip]:
    records = records or {}
    return [prepare_clip(c, cfg.pose_sigma, cfg.net.ac_patch, records.get(c.name)) for c in clips]


def temporal_indices(t: int, stride: int) -> tuple[int, int, int]:
    if t - 2 * stride < 0:
        raise WindowTooShort(f"frame {t} has no history at stride {stride}")
    return t - 2 * stride, t - stride, t


def sample_temporal_sequences(real: Sequence[torch.Tensor], fake: Sequence[torch.Tensor],
                              strides: Sequence[int] = (1, 2, 4), t: int | None = None):
    """Stack frames t-2s, t-s, t channelwise for each stride s.

    ``real`` and ``fake`` are per-frame tensors (C x H x W) of equal length.
    """
    n = len(real)
    if n != len(fake):
        raise WindowTooShort("real and fake sequences differ in length")
    if n < 1 + 2 * max(strides):
        raise WindowTooShort(f"window of {n} frames is too short for stride {max(strides)}")
    t = n - 1 if t is None else t
    real_seqs, fake_seqs = [], []
    for s in strides:
        idx = temporal_indices(t, s)
        real_seqs.append(torch.cat([real[k] for k in idx], dim=0))
        fake_seqs.append(torch.cat([fake[k] for k in idx], dim=0))
    return real_seqs, fake_seqs


@dataclass
class PairBatch:
    """Per part: consistent, inconsistent and fake pairs, each B x 6 x P x P."""

    pairs: dict[BodyPart, tuple[torch.Tensor, torch.Tensor, torch.Tensor]]
    partners: list[dict] = field(default_factory=list)


def sample_ac_pairs(anchors: Sequence[tuple[int, int]], fake_crops: dict[BodyPart, torch.Tensor],
                    cond_crops: dict[BodyPart, torch.Tensor], clips: Sequence[TrainClip],
                    rng: np.random.Generator) -> PairBatch:
    """Build appearance-consistency pairs for a batch.

    ``anchors[b]`` is (clip index, frame index) of the ground-truth frame of
    slot b. P1 pairs it with another frame of the same person, P2 with a
    frame of a different person, and the fake pair joins the generated part
    with the matching part of the appearance condition.
    """
    persons: dict[str, list[tuple[int, int]]] = {}
    for ci, c in enumerate(clips):
        n_all = c.crops[BodyPart.HEAD].shape[0]
        persons.setdefault(c.person, []).extend((ci, k) for k in range(n_all))
    names = sorted(persons)
    if len(names) < 2:
        raise InsufficientPersons(f"need at least 2 persons for appearance pairs, got {len(names)}")
    partners = []
    for ci, k in anchors:
        person = clips[ci].person
        same = [x for x in persons[person] if x != (ci, k)]
        if not same:
            raise InsufficientPersons(f"{person} has a single frame")
        p1 = same[int(rng.integers(len(same)))]
        others = [n for n in names if n != person]
        other = others[int(rng.integers(len(others)))]
        p2 = persons[other][int(rng.integers(len(persons[other])))]
        partners.append({"anchor": (ci, k), "same": p1, "other": p2})
    pairs = {}
    for part in PARTS:
        anchor = torch.stack([clips[ci].crops[part][k] for ci, k in anchors])
        same = torch.stack([clips[p["same"][0]].crops[part][p["same"][1]] for p in partners])
        other = torch.stack([clips[p["other"][0]].crops[part][p["other"][1]] for p in partners])
        pairs[part] = (
            torch.cat([anchor, same], dim=1),
            torch.cat([anchor, other], dim=1),
            torch.cat([fake_crops[part], cond_crops[part]], dim=1),
        )
    return PairBatch(pairs, partners)


# -- training loop -------------------------------------------------------------

@dataclass
class Slot:
    clip: int
    t: int = 0
    hist: dict[int, torch.Tensor] = field(default_factory=dict)
    hist_img: dict[int, torch.Tensor] = field(default_factory=dict)


def set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


class _Trainer:
    stage = ""

    def __init__(self, clips: Sequence[TrainClip], cfg: TrainingConfig):
        if not clips:
            raise ValueError("training set is empty")
        cfg.validate()
        self.cfg = cfg
        self.clips = list(clips)
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        self.G: nn.Module
        self.Ds: dict[str, nn.Module] = {}
        self._build()
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=cfg.learning_rate, betas=betas)
        self.opt_d = torch.optim.Adam(
            [p for d in self.Ds.values() for p in d.parameters()], lr=cfg.learning_rate, betas=betas
        )
        self.slots = [Slot(self._draw_clip()) for _ in range(cfg.batch_size)]
        self.max_stride = max(cfg.temporal_strides[: cfg.net.n_temporal_scales])

    def _build(self) -> None:
        raise NotImplementedError

    def _draw_clip(self) -> int:
        return int(self.rng.integers(len(self.clips)))

    @property
    def steps_per_epoch(self) -> int:
        frames = sum(c.n_frames for c in self.clips)
        return max(1, math.ceil(frames / self.cfg.batch_size))

    @property
    def epoch(self) -> int:
        return self.step_count // self.steps_per_epoch

    def total_steps(self) -> int:
        if self.cfg.max_steps is not None:
            return self.cfg.max_steps
        return self.cfg.epochs * self.steps_per_epoch

    def _strides(self):
        return list(self.cfg.temporal_strides[: self.cfg.net.n_temporal_scales])

    def _temporal(self, current: torch.Tensor, real_frame, hist_key: str):
        """Real/fake stride stacks per temporal scale; None where no slot qualifies."""
        real_seqs, fake_seqs = [], []
        for s in self._strides():
            idx = [b for b, slot in enumerate(self.slots) if slot.t - 2 * s >= 0]
            if not idx:
                real_seqs.append(None)
                fake_seqs.append(None)
                continue
            rs, fs = [], []
            for b in idx:
                slot = self.slots[b]
                c = self.clips[slot.clip]
                i0, i1, i2 = temporal_indices(slot.t, s)
                past = getattr(slot, hist_key)
                rs.append(torch.cat([real_frame(c, i0), real_frame(c, i1), real_frame(c, i2)]))
                fs.append(torch.cat([past[i0], past[i1], current[b]]))
            real_seqs.append(torch.stack(rs))
            fake_seqs.append(torch.stack(fs))
        return real_seqs, fake_seqs

    def _advance(self, outputs: torch.Tensor, images: torch.Tensor | None = None) -> None:
        keep = 2 * self.max_stride
        for b, slot in enumerate(self.slots):
            slot.hist[slot.t] = outputs[b].detach().clone()
            if images is not None:
                slot.hist_img[slot.t] = images[b].detach().clone()
            slot.t += 1
            for d in (slot.hist, slot.hist_img):
                for k in [k for k in d if k < slot.t - keep]:
                    del d[k]
            if slot.t >= self.clips[slot.clip].n_frames:
                self.slots[b] = Slot(self._draw_clip())

    def _check_finite(self, parts: dict, out_dir: Path | None) -> None:
        terms = {k: _scalar(v) for k, v in parts.items()}
        if all(math.isfinite(v) for v in terms.values()):
            return
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / f"nonfinite_{self.stage}_{self.step_count}.json").write_text(
                json.dumps({"step": self.step_count, "terms": {k: repr(v) for k, v in terms.items()}}, indent=1)
            )
        raise NonFiniteLoss(f"{self.stage} step {self.step_count}: non-finite loss terms {terms}")

    # -- persistence --

    def state(self) -> tuple[dict[str, torch.Tensor], dict]:
        tensors = state_tensors(self.G, "G.")
        for name, d in self.Ds.items():
            tensors.update(state_tensors(d, f"{name}."))
        opt_meta = {}
        for oname, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            sd = opt.state_dict()
            steps = {}
            for idx, st in sd["state"].items():
                steps[str(idx)] = float(st["step"])
                tensors[f"{oname}.{idx}.exp_avg"] = st["exp_avg"]
                tensors[f"{oname}.{idx}.exp_avg_sq"] = st["exp_avg_sq"]
            opt_meta[oname] = steps
        slots_meta = []
        for b, slot in enumerate(self.slots):
            for k, v in slot.hist.items():
                tensors[f"slot.{b}.hist.{k}"] = v
            for k, v in slot.hist_img.items():
                tensors[f"slot.{b}.img.{k}"] = v
            slots_meta.append({"clip": slot.clip, "t": slot.t,
                               "hist": sorted(slot.hist), "img": sorted(slot.hist_img)})
        meta = {
            "stage": self.stage,
            "step": self.step_count,
            "epoch": self.epoch,
            "training": self.cfg.to_json(),
            "optimizers": opt_meta,
            "slots": slots_meta,
            "clips": [c.name for c in self.clips],
        }
        return tensors, meta

    def save(self, root: str | Path) -> Path:
        """Write ``<root>/<stage>/<step>/{params.bin,config.json,rng.json}``."""
        tensors, meta = self.state()
        d = Path(root) / self.stage / f"{self.step_count:06d}"
        d.mkdir(parents=True, exist_ok=True)
        save_tensors(d / "params.bin", tensors, {"stage": self.stage, "step": self.step_count})
        (d / "config.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        (d / "rng.json").write_text(json.dumps(self.rng.bit_generator.state, sort_keys=True))
        return d

    def load(self, step_dir: str | Path) -> None:
        d = Path(step_dir)
        if not (d / "params.bin").exists():
            raise MissingCheckpoint(f"no params.bin in {d}")
        tensors, _ = load_tensors(d / "params.bin")
        meta = json.loads((d / "config.json").read_text())
        load_state(self.G, tensors, "G.")
        for name, net in self.Ds.items():
            load_state(net, tensors, f"{name}.")
        for oname, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            sd = opt.state_dict()
            sd["state"] = {
                int(idx): {
                    "step": torch.tensor(step),
                    "exp_avg": tensors[f"{oname}.{idx}.exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"{oname}.{idx}.exp_avg_sq"].clone(),
                }
                for idx, step in meta["optimizers"][oname].items()
            }
            opt.load_state_dict(sd)
        self.slots = []
        for b, sm in enumerate(meta["slots"]):
            slot = Slot(sm["clip"], sm["t"])
            slot.hist = {k: tensors[f"slot.{b}.hist.{k}"].clone() for k in sm["hist"]}
            slot.hist_img = {k: tensors[f"slot.{b}.img.{k}"].clone() for k in sm["img"]}
            self.slots.append(slot)
        self.step_count = meta["step"]
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = json.loads((d / "rng.json").read_text())

    def run(self, steps: int | None = None, out_dir: str | Path | None = None,
            log_path: str | Path | None = None) -> list[LossReport]:
        """Train for ``steps`` steps (default: the configured budget)."""
        out = Path(out_dir) if out_dir is not None else None
        steps = self.total_steps() - self.step_count if steps is None else steps
        reports = []
        fh = open(log_path, "a") if log_path else None
        t0 = time.perf_counter()
        try:
            for _ in range(steps):
                rep = self.step(out)
                rep.wall_time = time.perf_counter() - t0
                reports.append(rep)
                if fh:
                    fh.write(json.dumps(rep.to_json(), sort_keys=True) + "\n")
                every = self.cfg.checkpoint_every
                if out is not None and every and self.step_count % every == 0:
                    self.save(out)
        finally:
            if fh:
                fh.close()
        return reports

    def step(self, out_dir: Path | None = None) -> LossReport:
        raise NotImplementedError


class LayoutTrainer(_Trainer):
    stage = "layout"

    def _build(self) -> None:
        cfg, seed = self.cfg, self.cfg.seed
        self.G = build_layout_generator(cfg.net, cfg.frame_size, seed)
        self.Ds = {
            "D": build_discriminator(N_CLASSES + LAYOUT_COND_CHANNELS, cfg.net, seed + 1),
            "DT": build_temporal_discriminator(N_CLASSES, cfg.net, seed + 2),
        }

    def step(self, out_dir: Path | None = None) -> LossReport:
        cfg = self.cfg
        D, DT = self.Ds["D"], self.Ds["DT"]
        h, w = cfg.frame_size
        zero = torch.zeros(N_CLASSES, h, w)
        items = [(self.clips[s.clip], s.t, s) for s in self.slots]
        cond = torch.stack([window([c.cond["sp"], c.cond["tp"], c.cond["tlo"]], t) for c, t, _ in items])
        prev = torch.stack([history(s.hist, t, zero) for _, t, s in items])
        cond_t = torch.stack([torch.cat([c.cond["sp"][t], c.cond["tp"][t], c.cond["tlo"][t]]) for c, t, _ in items])
        real = torch.stack([c.onehot[t] for c, t, _ in items])
        labels = torch.stack([c.labels[t] for c, t, _ in items])

        logits = self.G(cond, prev)
        probs = torch.softmax(logits, dim=1)
        use_t = cfg.lambda_t > 0
        real_seqs, fake_seqs = self._temporal(probs, lambda c, k: c.onehot[k], "hist") if use_t else ([], [])
        use_t = use_t and any(s is not None for s in fake_seqs)

        # discriminator update
        set_requires_grad(self.Ds.values(), True)
        self.opt_d.zero_grad(set_to_none=True)
        d_obj = adversarial_loss(D(torch.cat([real, cond_t], 1)), D(torch.cat([probs.detach(), cond_t], 1)), "D")
        if use_t:
            detached = [None if s is None else s.detach() for s in fake_seqs]
            d_obj = d_obj + cfg.lambda_t * temporal_gan_loss(DT, real_seqs, detached, "D")
        (-d_obj).backward()
        self.opt_d.step()

        # generator update
        set_requires_grad(self.Ds.values(), False)
        self.opt_g.zero_grad(set_to_none=True)
        d_fake = D(torch.cat([probs, cond_t], 1))
        parts = {"gan_lo": -adversarial_loss(None, d_fake, "G"), "ss": 0.0, "t_lo": 0.0, "fm_lo": 0.0}
        if cfg.lambda_fm > 0:
            with torch.no_grad():
                d_real = D(torch.cat([real, cond_t], 1))
            parts["fm_lo"] = feature_matching_loss(d_real, d_fake)
        if cfg.lambda_ss > 0:
            parts["ss"] = structural_sensitive_loss(logits, labels)
        if use_t:
            parts["t_lo"] = -temporal_gan_loss(DT, None, fake_seqs, "G")
        self._check_finite(parts, out_dir)
        loss = total_layout_objective(parts, cfg)
        loss.backward()
        self.opt_g.step()

        with torch.no_grad():
            acc = (logits.argmax(1) == labels).float().mean()
        self._advance(probs)
        self.step_count += 1
        return LossReport.from_parts(self.step_count, "layout", parts, cfg,
                                     extra={"d_obj": d_obj, "pixel_acc": acc})


class AppearanceTrainer(_Trainer):
    stage = "appearance"

    def __init__(self, clips: Sequence[TrainClip], cfg: TrainingConfig,
                 pair_pool: Sequence[TrainClip] = ()):
        self.pair_clips = list(clips) + [c for c in pair_pool if all(c is not d for d in clips)]
        super().__init__(clips, cfg)
        if cfg.lambda_ac > 0:
            if len({c.person for c in self.pair_clips}) < 2:
                raise InsufficientPersons("appearance-consistency pairs need at least 2 persons")
        for c in self.clips:
            if c.layout_src is None:
                c.layout_src = c.onehot
        self.extractor = FixedFeatureExtractor(seed=cfg.seed + 99)

    def _build(self) -> None:
        cfg, seed, net = self.cfg, self.cfg.seed, self.cfg.net
        scene_cond = APPEARANCE_FG_CHANNELS + MOTION_CHANNELS + 3
        part_cond = 3 + MOTION_CHANNELS
        self.G = build_appearance_generator(net, cfg.frame_size, seed)
        self.Ds = {"DS": build_discriminator(3 + scene_cond, net, seed + 1)}
        for k, part in enumerate(PARTS):
            key = PART_KEYS[part]
            self.Ds[f"D{key}"] = build_discriminator(3 + part_cond, net, seed + 2 + k)
            self.Ds[f"DAC{key}"] = build_discriminator(6, net, seed + 5 + k)
        self.Ds["DT"] = build_temporal_discriminator(3, net, seed + 8)

    def step(self, out_dir: Path | None = None) -> LossReport:
        cfg = self.cfg
        P = cfg.net.ac_patch
        h, w = cfg.frame_size
        zero = torch.zeros(3, h, w)
        items = [(self.clips[s.clip], s.t, s) for s in self.slots]
        x1 = torch.stack([window([c.cond["tfg"]], t) for c, t, _ in items])
        x2 = torch.stack([window([c.cond["sp"], c.layout_src], t) for c, t, _ in items])
        x3 = torch.stack([history(s.hist, t, zero) for _, t, s in items])
        lay = torch.stack([c.layout_src[t] for c, t, _ in items])
        lab = lay.argmax(dim=1)
        mask = (lab > 0).float()[:, None]
        bg = torch.stack([c.background for c, _, _ in items])
        real_img = torch.stack([c.image[t] for c, t, _ in items])
        tfg_t = torch.stack([c.cond["tfg"][t] for c, t, _ in items])
        tlo_t = torch.stack([c.cond["tlo"][t] for c, t, _ in items])
        motion_t = torch.cat([torch.stack([c.cond["sp"][t] for c, t, _ in items]), lay], 1)
        x_scene = torch.cat([tfg_t, motion_t, bg], 1)

        fg, shadow = self.G(x1, x2, x3)
        fake_img = compose_scene(fg, mask, render_shadowed_background(bg, shadow))

        # part crops: boxes from the conditioning layout (real and fake share them)
        boxes, cond_boxes = {}, {}
        part_real, part_fake, part_cond, ac_fake, ac_cond = {}, {}, {}, {}, {}
        for part in PARTS:
            pm = torch.zeros_like(lab, dtype=torch.bool)
            for c in part.classes:
                pm |= lab == c
            pmf = pm[:, None].float()
            boxes[part] = [part_bbox(pm[b]) for b in range(len(items))]
            cond_boxes[part] = [part_bbox(tlo_t[b, PART_CHANNEL_SLICES[part]].sum(0) > 0) for b in range(len(items))]
            rgb = PART_RGB_SLICES[part]
            cond_full = torch.cat([tfg_t[:, rgb], motion_t * pmf], 1)
            part_real[part] = torch.stack([crop_resize(real_img[b] * pmf[b], boxes[part][b], P) for b in range(len(items))])
            part_fake[part] = torch.stack([crop_resize(fg[b] * pmf[b], boxes[part][b], P) for b in range(len(items))])
            part_cond[part] = torch.stack([crop_resize(cond_full[b], boxes[part][b], P) for b in range(len(items))])
            ac_fake[part] = part_fake[part]
            ac_cond[part] = torch.stack([crop_resize(tfg_t[b, rgb], cond_boxes[part][b], P) for b in range(len(items))])

        use_ac = cfg.lambda_ac > 0
        if use_ac:
            anchors = [(s.clip, s.t) for s in self.slots]
            clip_index = {id(c): k for k, c in enumerate(self.pair_clips)}
            anchors = [(clip_index[id(self.clips[ci])], t) for ci, t in anchors]
            pairs = sample_ac_pairs(anchors, ac_fake, ac_cond, self.pair_clips, self.rng).pairs
        use_t = cfg.lambda_t > 0
        real_seqs, fake_seqs = self._temporal(fake_img, lambda c, k: c.image[k], "hist_img") if use_t else ([], [])
        use_t = use_t and any(s is not None for s in fake_seqs)

        # discriminator update
        set_requires_grad(self.Ds.values(), True)
        self.opt_d.zero_grad(set_to_none=True)
        DS = self.Ds["DS"]
        d_obj = adversarial_loss(DS(torch.cat([real_img, x_scene], 1)),
                                 DS(torch.cat([fake_img.detach(), x_scene], 1)), "D")
        for part in PARTS:
            key = PART_KEYS[part]
            Dp = self.Ds[f"D{key}"]
            d_obj = d_obj + adversarial_loss(Dp(torch.cat([part_real[part], part_cond[part]], 1)),
                                             Dp(torch.cat([part_fake[part].detach(), part_cond[part]], 1)), "D")
            if use_ac:
                p1, p2, pf = pairs[part]
                d_obj = d_obj + cfg.lambda_ac * appearance_consistency_loss(
                    self.Ds[f"DAC{key}"], p1, p2, pf.detach(), "D")
        if use_t:
            detached = [None if s is None else s.detach() for s in fake_seqs]
            d_obj = d_obj + cfg.lambda_t * temporal_gan_loss(self.Ds["DT"], real_seqs, detached, "D")
        (-d_obj).backward()
        self.opt_d.step()

        # generator update
        set_requires_grad(self.Ds.values(), False)
        self.opt_g.zero_grad(set_to_none=True)
        parts: dict[str, object] = {k: 0.0 for k in ("t_a", "fm_a", "vgg")}
        fm_terms = []
        d_fake = DS(torch.cat([fake_img, x_scene], 1))
        parts["gan_s"] = -adversarial_loss(None, d_fake, "G")
        if cfg.lambda_fm > 0:
            with torch.no_grad():
                d_real = DS(torch.cat([real_img, x_scene], 1))
            fm_terms.append(feature_matching_loss(d_real, d_fake))
        for part in PARTS:
            key = PART_KEYS[part]
            Dp = self.Ds[f"D{key}"]
            out_fake = Dp(torch.cat([part_fake[part], part_cond[part]], 1))
            parts[f"gan_{key}"] = -adversarial_loss(None, out_fake, "G")
            if cfg.lambda_fm > 0:
                with torch.no_grad():
                    out_real = Dp(torch.cat([part_real[part], part_cond[part]], 1))
                fm_terms.append(feature_matching_loss(out_real, out_fake))
            parts[f"ac_{key}"] = (
                -appearance_consistency_loss(self.Ds[f"DAC{key}"], None, None, pairs[part][2], "G")
                if use_ac else 0.0
            )
        if fm_terms:
            parts["fm_a"] = torch.stack(fm_terms).mean()
        if use_t:
            parts["t_a"] = -temporal_gan_loss(self.Ds["DT"], None, fake_seqs, "G")
        if cfg.lambda_vgg > 0:
            parts["vgg"] = perceptual_loss(real_img, fake_img, self.extractor)
        self._check_finite(parts, out_dir)
        loss = total_appearance_objective(parts, cfg)
        loss.backward()
        self.opt_g.step()

        self._advance(fg, fake_img)
        self.step_count += 1
        extra = {"d_obj": d_obj}
        for part in PARTS:
            key = PART_KEYS[part]
            extra[f"acgan_{key}"] = _scalar(parts[f"gan_{key}"]) + cfg.lambda_ac * _scalar(parts[f"ac_{key}"])
        return LossReport.from_parts(self.step_count, "appearance", parts, cfg, extra=extra)


# -- entry points ---------------------------------------------------------------

@dataclass
class TrainResult:
    trainer: _Trainer
    reports: list[LossReport]
    checkpoint: Path | None

    @property
    def generator(self) -> nn.Module:
        return self.trainer.G


def _as_train_clips(dataset, cfg) -> list[TrainClip]:
    items = list(dataset)
    if items and isinstance(items[0], ClipRecord):
        return prepare_training_set(items, cfg)
    return items


def train_layout_gan(dataset, cfg: TrainingConfig, out_dir: str | Path | None = None,
                     resume: str | Path | None = None, steps: int | None = None) -> TrainResult:
    """Train the layout GAN; ``dataset`` holds ClipRecords or prepared TrainClips."""
    clips = _as_train_clips(dataset, cfg)
    trainer = LayoutTrainer(clips, cfg)
    if resume is not None:
        trainer.load(resume)
    log_path = Path(out_dir) / "layout_losses.jsonl" if out_dir else None
    if log_path:
        log_path.parent.mkdir(parents=True, exist_ok=True)
    reports = trainer.run(steps, out_dir, log_path)
    ckpt = trainer.save(out_dir) if out_dir is not None else None
    return TrainResult(trainer, reports, ckpt)


def attach_generated_layouts(clips: Sequence[TrainClip], layout_checkpoint: str | Path) -> None:
    G, _, _ = load_layout_generator(layout_checkpoint)
    for c in clips:
        c.layout_src = layout_rollout(G, c.cond)


def train_appearance_gan(dataset, cfg: TrainingConfig, layout_source: str = "ground_truth",
                         layout_checkpoint: str | Path | None = None, out_dir: str | Path | None = None,
                         pair_pool=(), resume: str | Path | None = None, steps: int | None = None) -> TrainResult:
    """Train the appearance GAN.

    ``layout_source="ground_truth"`` feeds true layouts (teacher forcing);
    ``"layout_checkpoint"`` feeds layouts generated by a trained layout GAN.
    ``pair_pool`` adds clips used only as appearance-pair partners.
    """
    if layout_source not in ("ground_truth", "layout_checkpoint"):
        raise ValueError(f"unknown layout source {layout_source!r}")
    clips = _as_train_clips(dataset, cfg)
    pool = _as_train_clips(pair_pool, cfg) if pair_pool else []
    if layout_source == "layout_checkpoint":
        if layout_checkpoint is None:
            raise MissingCheckpoint("layout_checkpoint source requires a layout checkpoint path")
        attach_generated_layouts(clips, layout_checkpoint)
    trainer = AppearanceTrainer(clips, cfg, pool)
    if resume is not None:
        trainer.load(resume)
    log_path = Path(out_dir) / "appearance_losses.jsonl" if out_dir else None
    if log_path:
        log_path.parent.mkdir(parents=True, exist_ok=True)
    reports = trainer.run(steps, out_dir, log_path)
    ckpt = trainer.save(out_dir) if out_dir is not None else None
    return TrainResult(trainer, reports, ckpt)


# -- training-set metrics ------------------------------------------------------

@torch.no_grad()
def layout_accuracy(G: nn.Module, clips: Sequence[TrainClip]) -> float:
    """Pixel accuracy of recurrent layout generation over every motion frame."""
    correct = total = 0
    for c in clips:
        pred = layout_rollout(G, c.cond).argmax(dim=1)
        correct += int((pred == c.labels).sum())
        total += c.labels.numel()
    return correct / total


@torch.no_grad()
def appearance_outputs(A: nn.Module, clip: TrainClip):
    layout = clip.layout_src if clip.layout_src is not None else clip.onehot
    return appearance_rollout(A, clip.cond, layout, clip.background)
