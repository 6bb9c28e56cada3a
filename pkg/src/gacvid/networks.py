"""Generators and discriminators.

All generators follow the pix2pixHD global-generator pattern: a 7x7 stem,
stride-2 downsampling, residual blocks at the bottleneck and mirrored
transposed-conv upsampling. Multi-input generators give every input its own
encoder and sum the encoder outputs at the bottleneck.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import N_CLASSES, N_FG_CLASSES, N_POINTS, NetConfig
from .errors import ConfigError, FormatError, MissingCheckpoint, ShapeMismatch

# Channel bookkeeping for one frame of each conditioning stream.
LAYOUT_COND_CHANNELS = 2 * N_POINTS + N_FG_CLASSES  # X_SP + X_TP + X_TLO = 54
APPEARANCE_FG_CHANNELS = 9  # X_TFG
MOTION_CHANNELS = N_POINTS + N_CLASSES  # X_SP + layout = 34
SHADOW_EPS = 1e-4


def _norm(c: int) -> nn.Module:
    return nn.InstanceNorm2d(c, affine=False)


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(c, c, 3), _norm(c), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(c, c, 3), _norm(c),
        )

    def forward(self, x):
        return x + self.body(x)


def _widths(cfg: NetConfig) -> list[int]:
    return [min(cfg.base_filters * 2**k, cfg.max_filters) for k in range(cfg.n_downsamples + 1)]


class Encoder(nn.Module):
    def __init__(self, in_channels: int, cfg: NetConfig):
        super().__init__()
        w = _widths(cfg)
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_channels, w[0], 7), _norm(w[0]), nn.ReLU(True)]
        for k in range(cfg.n_downsamples):
            layers += [nn.Conv2d(w[k], w[k + 1], 3, stride=2, padding=1), _norm(w[k + 1]), nn.ReLU(True)]
        self.net = nn.Sequential(*layers)
        self.out_channels = w[-1]

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, out_channels: int, cfg: NetConfig):
        super().__init__()
        w = _widths(cfg)
        layers: list[nn.Module] = [ResBlock(w[-1]) for _ in range(cfg.n_resblocks)]
        for k in range(cfg.n_downsamples, 0, -1):
            layers += [
                nn.ConvTranspose2d(w[k], w[k - 1], 3, stride=2, padding=1, output_padding=1),
                _norm(w[k - 1]),
                nn.ReLU(True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w[0], out_channels, 7)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _check_frame(x: torch.Tensor, cfg: NetConfig) -> None:
    f = 2**cfg.n_downsamples
    if x.shape[-2] % f or x.shape[-1] % f:
        raise ShapeMismatch(f"spatial size {tuple(x.shape[-2:])} not divisible by {f}")


class LayoutGenerator(nn.Module):
    """Condition window + two previous layouts -> 13-class layout logits."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.cond_channels = 3 * LAYOUT_COND_CHANNELS
        self.prev_channels = 2 * N_CLASSES
        self.enc_cond = Encoder(self.cond_channels, cfg)
        self.enc_prev = Encoder(self.prev_channels, cfg)
        self.dec = Decoder(N_CLASSES, cfg)

    def forward(self, cond: torch.Tensor, prev: torch.Tensor) -> torch.Tensor:
        _check_frame(cond, self.cfg)
        return self.dec(self.enc_cond(cond) + self.enc_prev(prev))


class AppearanceGenerator(nn.Module):
    """Three encoders, two decoders: foreground RGB and a shadow multiplier.

    The shadow decoder only sees the motion and history encoders, so its
    output cannot depend on the target appearance input.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.fg_channels = 3 * APPEARANCE_FG_CHANNELS
        self.motion_channels = 3 * MOTION_CHANNELS
        self.prev_channels = 2 * 3
        self.enc_appearance = Encoder(self.fg_channels, cfg)
        self.enc_motion = Encoder(self.motion_channels, cfg)
        self.enc_prev = Encoder(self.prev_channels, cfg)
        self.dec_fg = Decoder(3, cfg)
        self.dec_shadow = Decoder(1, cfg)

    def forward(self, appearance: torch.Tensor, motion: torch.Tensor, prev: torch.Tensor):
        _check_frame(motion, self.cfg)
        shared = self.enc_motion(motion) + self.enc_prev(prev)
        fg = torch.sigmoid(self.dec_fg(self.enc_appearance(appearance) + shared))
        shadow = SHADOW_EPS + (1 - 2 * SHADOW_EPS) * torch.sigmoid(self.dec_shadow(shared))
        return fg, shadow


class PatchDiscriminator(nn.Module):
    """Four-conv PatchGAN returning logits and intermediate features."""

    def __init__(self, in_channels: int, cfg: NetConfig):
        super().__init__()
        nf = cfg.base_filters
        chans = [in_channels] + [min(nf * 2**k, cfg.max_filters) for k in range(cfg.n_disc_layers - 1)]
        blocks = []
        for k in range(cfg.n_disc_layers - 1):
            stride = 2 if k < 2 else 1
            layers = [nn.Conv2d(chans[k], chans[k + 1], 4, stride=stride, padding=2)]
            if k > 0:
                layers.append(_norm(chans[k + 1]))
            layers.append(nn.LeakyReLU(0.2, True))
            blocks.append(nn.Sequential(*layers))
        blocks.append(nn.Conv2d(chans[-1], 1, 4, stride=1, padding=2))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        feats = []
        for block in self.blocks[:-1]:
            x = block(x)
            feats.append(x)
        return self.blocks[-1](x), feats


class MultiscaleDiscriminator(nn.Module):
    """One PatchGAN per spatial scale; scale k sees the input downsampled 2^k times."""

    def __init__(self, in_channels: int, cfg: NetConfig, n_scales: int | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.n_scales = n_scales or cfg.n_disc_scales
        self.scales = nn.ModuleList(PatchDiscriminator(in_channels, cfg) for _ in range(self.n_scales))

    def forward(self, x: torch.Tensor):
        f = 2 ** (self.n_scales - 1)
        if x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"expected {self.in_channels} channels, got {x.shape[1]}")
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ShapeMismatch(f"input {tuple(x.shape[-2:])} not divisible by {f}")
        out = []
        for k, d in enumerate(self.scales):
            if k:
                x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
            out.append(d(x))
        return out


class TemporalDiscriminator(nn.Module):
    """One PatchGAN per temporal stride, each over three stacked frames."""

    def __init__(self, frame_channels: int, cfg: NetConfig):
        super().__init__()
        self.frame_channels = frame_channels
        self.n_scales = cfg.n_temporal_scales
        self.scales = nn.ModuleList(PatchDiscriminator(3 * frame_channels, cfg) for _ in range(self.n_scales))

    def forward(self, sequences: Sequence[torch.Tensor | None]):
        """``sequences[k]`` is the stride-k stack or None when unavailable."""
        if len(sequences) != self.n_scales:
            raise ShapeMismatch(f"expected {self.n_scales} sequences, got {len(sequences)}")
        out = []
        for d, seq in zip(self.scales, sequences):
            if seq is None:
                out.append(None)
                continue
            if seq.shape[1] != 3 * self.frame_channels:
                raise ShapeMismatch(f"sequence needs {3 * self.frame_channels} channels, got {seq.shape[1]}")
            out.append(d(seq))
        return out


# -- builders ----------------------------------------------------------------

def init_weights(module: nn.Module, seed: int) -> nn.Module:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
    return module


def _validated(cfg: NetConfig, frame_size) -> NetConfig:
    cfg.validate(frame_size)
    return cfg


def build_layout_generator(cfg: NetConfig, frame_size=None, seed: int = 0) -> LayoutGenerator:
    return init_weights(LayoutGenerator(_validated(cfg, frame_size)), seed)


def build_appearance_generator(cfg: NetConfig, frame_size=None, seed: int = 0) -> AppearanceGenerator:
    return init_weights(AppearanceGenerator(_validated(cfg, frame_size)), seed)


def build_discriminator(in_channels: int, cfg: NetConfig, seed: int = 0, n_scales: int | None = None):
    return init_weights(MultiscaleDiscriminator(in_channels, _validated(cfg, None), n_scales), seed)


def build_temporal_discriminator(frame_channels: int, cfg: NetConfig, seed: int = 0):
    return init_weights(TemporalDiscriminator(frame_channels, _validated(cfg, None)), seed)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- checkpoint container ------------------------------------------------------
#
# layout: magic(8) | version u32 | header_len u32 | header JSON | payload
# header = {"config": {...}, "tensors": [{"name", "shape", "offset", "count"}]}
# payload = little-endian float32 values, concatenated in header order.

CKPT_MAGIC = b"GACCKPT\x00"
CKPT_VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor | np.ndarray], config: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else np.asarray(arr)
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a gacvid checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=e["count"], offset=start).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return out, header["config"]


def state_tensors(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_state(module: nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Copy ``prefix``-named tensors into ``module`` after checking every shape."""
    own = module.state_dict()
    for k, v in own.items():
        key = prefix + k
        if key not in tensors:
            raise FormatError(f"checkpoint is missing tensor {key}")
        if tuple(tensors[key].shape) != tuple(v.shape):
            raise FormatError(f"shape mismatch for {key}: {tuple(tensors[key].shape)} vs {tuple(v.shape)}")
    module.load_state_dict({k: tensors[prefix + k].to(v.dtype) for k, v in own.items()})


def net_config_from_json(obj: dict) -> NetConfig:
    try:
        return NetConfig(**obj)
    except TypeError as exc:
        raise ConfigError(f"bad network config: {exc}") from exc
