"""Objective terms for the layout and appearance GANs.

Adversarial helpers return the log-likelihood objective exactly as written
(negative numbers, larger is better for the side being updated). The
trainer negates them; :class:`LossReport` stores minimisation-form values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import N_CLASSES
from .errors import NonFinite, ShapeMismatch

EPS = 1e-7

# Regions for the joint structure term: head merges hair and face.
JOINT_REGIONS = ((1, 2), (3,), (7,), (5,), (6,), (8,), (9,), (10,), (11,))


def _as_list(logits) -> list[torch.Tensor]:
    """Accept a tensor, a list of tensors, or multiscale ``(logits, feats)`` pairs."""
    if isinstance(logits, torch.Tensor):
        return [logits]
    out = []
    for item in logits:
        if item is None:
            continue
        out.append(item[0] if isinstance(item, (tuple, list)) else item)
    return out


def _log_prob(logits: torch.Tensor, real: bool) -> torch.Tensor:
    p = torch.sigmoid(logits).clamp(EPS, 1 - EPS)
    return torch.log(p) if real else torch.log1p(-p)


def _mean_over_scales(logits, real: bool) -> torch.Tensor:
    items = _as_list(logits)
    if not items:
        raise ShapeMismatch("no discriminator outputs to score")
    for x in items:
        if not torch.isfinite(x).all():
            raise NonFinite("discriminator produced non-finite logits")
    return torch.stack([_log_prob(x, real).mean() for x in items]).mean()


def adversarial_loss(real_logits, fake_logits, side: str) -> torch.Tensor:
    """``D``: E[log D(real)] + E[log(1 - D(fake))]; ``G``: E[log D(fake)].

    Means are taken over patches and then over discriminator scales.
    ``real_logits`` is ignored on the generator side.
    """
    if side == "D":
        return _mean_over_scales(real_logits, True) + _mean_over_scales(fake_logits, False)
    if side == "G":
        return _mean_over_scales(fake_logits, True)
    raise ValueError(f"side must be 'D' or 'G', got {side!r}")


def pixel_softmax_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy; ``logits`` is N x 13 x H x W, ``labels`` N x H x W."""
    if logits.ndim != 4 or logits.shape[1] != N_CLASSES or labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    return F.cross_entropy(logits, labels.long())


def region_centers(layout: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalised (x, y) centre of each joint region, plus a presence mask.

    ``layout`` is N x H x W; returns centres N x 9 x 2 and present N x 9.
    """
    n, h, w = layout.shape
    ys = (torch.arange(h, dtype=torch.float64) / max(h - 1, 1)).view(1, h, 1)
    xs = (torch.arange(w, dtype=torch.float64) / max(w - 1, 1)).view(1, 1, w)
    centers = torch.zeros(n, len(JOINT_REGIONS), 2, dtype=torch.float64)
    present = torch.zeros(n, len(JOINT_REGIONS), dtype=torch.bool)
    for i, classes in enumerate(JOINT_REGIONS):
        m = torch.zeros_like(layout, dtype=torch.bool)
        for c in classes:
            m |= layout == c
        cnt = m.sum(dim=(1, 2))
        present[:, i] = cnt > 0
        safe = cnt.clamp(min=1).to(torch.float64)
        mf = m.to(torch.float64)
        centers[:, i, 0] = (mf * xs).sum(dim=(1, 2)) / safe
        centers[:, i, 1] = (mf * ys).sum(dim=(1, 2)) / safe
    return centers, present


def joint_structure_loss(real_layout: torch.Tensor, fake_layout: torch.Tensor) -> torch.Tensor:
    """(1/2n) * sum_i ||C_real_i - C_fake_i||^2 over regions present in both maps.

    Averaged over the batch; a sample with no shared region contributes 0.
    """
    if real_layout.shape != fake_layout.shape:
        raise ShapeMismatch(f"{tuple(real_layout.shape)} vs {tuple(fake_layout.shape)}")
    if real_layout.ndim == 2:
        real_layout, fake_layout = real_layout[None], fake_layout[None]
    cr, pr = region_centers(real_layout)
    cf, pf = region_centers(fake_layout)
    both = pr & pf
    sq = ((cr - cf) ** 2).sum(dim=-1) * both
    n = both.sum(dim=1)
    per_sample = torch.where(n > 0, sq.sum(dim=1) / (2 * n.clamp(min=1)), torch.zeros_like(sq[:, 0]))
    return per_sample.mean()


def structural_sensitive_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Pixel cross-entropy weighted by the joint structure loss of the argmax layout.

    The structure factor is computed per sample from the hard prediction and
    acts as a constant weight on that sample's cross-entropy.
    """
    pixel = F.cross_entropy(logits, labels.long(), reduction="none").mean(dim=(1, 2))
    pred = logits.detach().argmax(dim=1)
    joint = torch.stack([joint_structure_loss(labels[k:k + 1], pred[k:k + 1]) for k in range(len(labels))])
    return (joint.to(pixel.dtype) * pixel).mean()


def appearance_consistency_from_logits(l_p1, l_p2, l_fake, side: str) -> torch.Tensor:
    if side == "D":
        return (_mean_over_scales(l_p1, True) + _mean_over_scales(l_p2, False)
                + _mean_over_scales(l_fake, False))
    if side == "G":
        return _mean_over_scales(l_fake, True)
    raise ValueError(f"side must be 'D' or 'G', got {side!r}")


def appearance_consistency_loss(d_ac: nn.Module, p1, p2, p_fake, side: str) -> torch.Tensor:
    """Consistent pairs are real; inconsistent and fake pairs are fake for D.

    On the generator side only the fake pairs are scored, as real.
    """
    if side == "D":
        if not (p1.shape == p2.shape == p_fake.shape):
            raise ShapeMismatch(f"pair shapes differ: {p1.shape}, {p2.shape}, {p_fake.shape}")
        return appearance_consistency_from_logits(d_ac(p1), d_ac(p2), d_ac(p_fake), "D")
    return appearance_consistency_from_logits(None, None, d_ac(p_fake), side)


def temporal_gan_loss(d_t: nn.Module, real_seqs, fake_seqs, side: str) -> torch.Tensor:
    """Adversarial loss over the available temporal scales, averaged across them."""
    fake_out = d_t(fake_seqs)
    if side == "G":
        terms = [adversarial_loss(None, f, "G") for f in fake_out if f is not None]
    else:
        real_out = d_t(real_seqs)
        terms = [adversarial_loss(r, f, "D") for r, f in zip(real_out, fake_out) if f is not None]
    if not terms:
        raise ShapeMismatch("no temporal scale has a usable sequence")
    return torch.stack(terms).mean()


def feature_matching_loss(real_features, fake_features) -> torch.Tensor:
    """Mean absolute feature difference, averaged over layers then scales.

    Both arguments are multiscale discriminator outputs (lists of
    ``(logits, [features...])``) or plain lists of feature lists.
    """
    def feats(item):
        return item[1] if isinstance(item, tuple) else item

    if len(real_features) != len(fake_features):
        raise ShapeMismatch("feature lists have different numbers of scales")
    per_scale = []
    for r, f in zip(real_features, fake_features):
        rf, ff = feats(r), feats(f)
        if len(rf) != len(ff):
            raise ShapeMismatch("feature lists have different depths")
        layers = []
        for a, b in zip(rf, ff):
            if a.shape != b.shape:
                raise ShapeMismatch(f"feature shapes {tuple(a.shape)} vs {tuple(b.shape)}")
            layers.append((a.detach() - b).abs().mean())
        per_scale.append(torch.stack(layers).mean())
    return torch.stack(per_scale).mean()


class FixedFeatureExtractor(nn.Module):
    """Seeded, frozen stack of strided 3x3 convs used as a perceptual proxy.

    Any module returning a list of feature maps can be plugged in instead
    (e.g. a pretrained VGG trunk).
    """

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (16, 32, 64, 128), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        c = in_channels
        for w in widths:
            conv = nn.Conv2d(c, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (9 * c)))
                conv.bias.zero_()
            self.convs.append(conv)
            c = w
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def perceptual_loss(real: torch.Tensor, fake: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Sum over stages k of 2^-k times the mean absolute feature difference."""
    if real.shape != fake.shape:
        raise ShapeMismatch(f"{tuple(real.shape)} vs {tuple(fake.shape)}")
    extractor = extractor.to(fake.dtype)
    fr = extractor(real.detach())
    ff = extractor(fake)
    return sum((0.5**k) * (a - b).abs().mean() for k, (a, b) in enumerate(zip(fr, ff)))


# -- totals ------------------------------------------------------------------

LAYOUT_TERMS = ("gan_lo", "ss", "t_lo", "fm_lo")
APPEARANCE_TERMS = ("gan_h", "ac_h", "gan_u", "ac_u", "gan_l", "ac_l", "gan_s", "t_a", "fm_a", "vgg")


def _weights(lams) -> dict:
    get = lams.get if isinstance(lams, Mapping) else (lambda k, d=None: getattr(lams, k, d))
    return {k: get(k) for k in ("lambda_ac", "lambda_ss", "lambda_t", "lambda_fm", "lambda_vgg")}


def _check(parts: Mapping[str, object], names) -> None:
    for k in names:
        v = parts[k]
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise NonFinite(f"loss term {k} is not finite")


def total_layout_objective(parts: Mapping[str, object], lams):
    """gan + lambda_SS * ss + lambda_T * t + lambda_FM * fm."""
    _check(parts, LAYOUT_TERMS)
    w = _weights(lams)
    return (parts["gan_lo"] + w["lambda_ss"] * parts["ss"] + w["lambda_t"] * parts["t_lo"]
            + w["lambda_fm"] * parts["fm_lo"])


def total_appearance_objective(parts: Mapping[str, object], lams):
    """Per-part (gan + lambda_AC * ac) + scene gan + weighted temporal, FM and perceptual terms."""
    _check(parts, APPEARANCE_TERMS)
    w = _weights(lams)
    total = parts["gan_s"]
    for p in ("h", "u", "l"):
        total = total + parts[f"gan_{p}"] + w["lambda_ac"] * parts[f"ac_{p}"]
    return (total + w["lambda_t"] * parts["t_a"] + w["lambda_fm"] * parts["fm_a"]
            + w["lambda_vgg"] * parts["vgg"])


@dataclass
class LossReport:
    step: int
    terms: dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0

    @classmethod
    def from_parts(cls, step: int, stage: str, parts: Mapping[str, object], lams,
                   extra: Mapping[str, object] | None = None, wall_time: float = 0.0) -> "LossReport":
        terms = {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in parts.items()}
        if stage == "layout":
            terms["L_LO"] = float(total_layout_objective(terms, lams))
        else:
            terms["L_A"] = float(total_appearance_objective(terms, lams))
        for k, v in (extra or {}).items():
            terms[k] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return cls(step, terms, wall_time)

    def to_json(self) -> dict:
        return {"step": self.step, "wall_time": self.wall_time, **self.terms}
