"""Frame-by-frame generation and scene composition."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core_types import N_CLASSES, Pose, TrainingConfig
from .errors import EmptyLibrary, MissingCheckpoint, ShapeMismatch
from .networks import AppearanceGenerator, LayoutGenerator, load_state, load_tensors
from .preprocessing import AppearanceLibrary, ConditionRecord, make_condition_record
from .toy_data import write_layout_png, write_rgb_png, write_shadow

log = logging.getLogger(__name__)


# -- composition -------------------------------------------------------------

def _expand_like(m, ref):
    """Give a per-pixel map the trailing channel axis of a channels-last image."""
    if isinstance(ref, np.ndarray) and m.ndim == ref.ndim - 1:
        return m[..., None]
    return m


def _check_broadcast(a, b) -> None:
    try:
        shape = np.broadcast_shapes(tuple(a.shape), tuple(b.shape))
    except ValueError as exc:
        raise ShapeMismatch(f"shapes {tuple(a.shape)} and {tuple(b.shape)} do not match") from exc
    if shape != tuple(a.shape):
        raise ShapeMismatch(f"map {tuple(b.shape)} does not fit image {tuple(a.shape)}")


def render_shadowed_background(background, shadow):
    """Pixel-wise product of the background with the shadow multiplier."""
    shadow = _expand_like(shadow, background)
    _check_broadcast(background, shadow)
    return background * shadow


def compose_scene(foreground, fg_mask, shadowed_bg):
    """Foreground where the mask is set, shadowed background elsewhere."""
    if tuple(foreground.shape) != tuple(shadowed_bg.shape):
        raise ShapeMismatch(f"foreground {tuple(foreground.shape)} vs background {tuple(shadowed_bg.shape)}")
    m = _expand_like(fg_mask, foreground)
    _check_broadcast(foreground, m)
    if isinstance(m, np.ndarray):
        m = m.astype(foreground.dtype if np.issubdtype(foreground.dtype, np.floating) else np.float64)
    else:
        m = m.to(foreground.dtype)
    return m * foreground + (1 - m) * shadowed_bg


def erode_mask(mask: torch.Tensor, px: int) -> torch.Tensor:
    """Binary erosion of an N x 1 x H x W mask by ``px`` pixels (square element)."""
    if px <= 0:
        return mask
    k = 2 * px + 1
    return 1 - F.max_pool2d(1 - mask, k, stride=1, padding=px)


# -- tensor assembly ---------------------------------------------------------

def to_chw(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(np.asarray(a, dtype=np.float32), -1, 0)))


@torch.no_grad()
def condition_tensors(records: Sequence[ConditionRecord]) -> dict[str, torch.Tensor]:
    """Stack per-frame records into T x C x H x W tensors."""
    return {
        "sp": torch.stack([to_chw(r.source_pose) for r in records]),
        "tp": torch.stack([to_chw(r.target_pose) for r in records]),
        "tlo": torch.stack([to_chw(r.layout) for r in records]),
        "tfg": torch.stack([to_chw(r.foreground) for r in records]),
    }


def window(seqs: Sequence[torch.Tensor], t: int, offsets=(2, 1, 0)) -> torch.Tensor:
    """Channel concat of ``seqs`` at times ``t - offset``; missing times are zeros."""
    chunks = []
    for off in offsets:
        k = t - off
        for s in seqs:
            chunks.append(s[k] if k >= 0 else torch.zeros_like(s[0]))
    return torch.cat(chunks, dim=0)


def history(frames: dict[int, torch.Tensor], t: int, like: torch.Tensor) -> torch.Tensor:
    """Previously generated outputs at t-2 and t-1, zero-filled at the clip start."""
    return torch.cat([frames.get(t - 2, torch.zeros_like(like)), frames.get(t - 1, torch.zeros_like(like))], dim=0)


def onehot(labels: torch.Tensor) -> torch.Tensor:
    """T x H x W int labels -> T x 13 x H x W float."""
    return F.one_hot(labels.long(), N_CLASSES).permute(0, 3, 1, 2).float()


@torch.no_grad()
def layout_rollout(G: LayoutGenerator, cond: dict[str, torch.Tensor]) -> torch.Tensor:
    """Generate layout probabilities for every frame, feeding back outputs."""
    T = cond["sp"].shape[0]
    h, w = cond["sp"].shape[-2:]
    zero = torch.zeros(N_CLASSES, h, w, dtype=cond["sp"].dtype)
    prev: dict[int, torch.Tensor] = {}
    out = []
    for t in range(T):
        x = window([cond["sp"], cond["tp"], cond["tlo"]], t)[None]
        p = torch.softmax(G(x, history(prev, t, zero)[None]), dim=1)[0]
        prev[t] = p
        out.append(p)
    return torch.stack(out)


def fg_mask_from_layout(layout_probs: torch.Tensor) -> torch.Tensor:
    """Union of foreground classes of the argmax layout, T x 1 x H x W."""
    return (layout_probs.argmax(dim=1, keepdim=True) > 0).float()


@torch.no_grad()
def appearance_rollout(A: AppearanceGenerator, cond: dict[str, torch.Tensor], layout: torch.Tensor,
                       background: torch.Tensor, mask: torch.Tensor | None = None):
    """Generate foregrounds and shadow maps and compose them over ``background``.

    ``layout`` holds per-frame class probabilities (or one-hot maps),
    ``background`` is 3 x H x W in [0, 1]. Returns (fg, shadow, image, mask).
    """
    T = cond["sp"].shape[0]
    h, w = cond["sp"].shape[-2:]
    if mask is None:
        mask = fg_mask_from_layout(layout)
    zero = torch.zeros(3, h, w, dtype=cond["sp"].dtype)
    prev: dict[int, torch.Tensor] = {}
    fgs, shadows, images = [], [], []
    for t in range(T):
        x1 = window([cond["tfg"]], t)[None]
        x2 = window([cond["sp"], layout], t)[None]
        fg, sh = A(x1, x2, history(prev, t, zero)[None])
        prev[t] = fg[0]
        img = compose_scene(fg, mask[t:t + 1], render_shadowed_background(background[None], sh))
        fgs.append(fg[0])
        shadows.append(sh[0])
        images.append(img[0])
    return torch.stack(fgs), torch.stack(shadows), torch.stack(images), mask


# -- checkpoints -------------------------------------------------------------

def resolve_checkpoint(path: str | Path) -> Path:
    """Accept a params.bin, a step directory, or a stage directory (latest step)."""
    path = Path(path)
    if path.is_file():
        return path
    if (path / "params.bin").is_file():
        return path / "params.bin"
    if path.is_dir():
        steps = sorted((int(p.name), p) for p in path.iterdir() if p.name.isdigit() and (p / "params.bin").is_file())
        if steps:
            return steps[-1][1] / "params.bin"
    raise MissingCheckpoint(f"no checkpoint found at {path}")


def load_config_for(params: Path) -> TrainingConfig:
    cfg_path = params.parent / "config.json"
    if not cfg_path.exists():
        raise MissingCheckpoint(f"missing config.json next to {params}")
    obj = json.loads(cfg_path.read_text())
    return TrainingConfig.from_json(obj["training"])


def load_layout_generator(path: str | Path) -> tuple[LayoutGenerator, TrainingConfig, Path]:
    params = resolve_checkpoint(path)
    cfg = load_config_for(params)
    G = LayoutGenerator(cfg.net)
    tensors, _ = load_tensors(params)
    load_state(G, tensors, "G.")
    return G.eval(), cfg, params


def load_appearance_generator(path: str | Path) -> tuple[AppearanceGenerator, TrainingConfig, Path]:
    params = resolve_checkpoint(path)
    cfg = load_config_for(params)
    A = AppearanceGenerator(cfg.net)
    tensors, _ = load_tensors(params)
    load_state(A, tensors, "G.")
    return A.eval(), cfg, params


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _to_u8(x: torch.Tensor) -> np.ndarray:
    """C x H x W in [0, 1] -> H x W x C uint8."""
    arr = x.detach().permute(1, 2, 0).numpy().astype(np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def prepare_background(background: np.ndarray, frame_size: tuple[int, int]) -> torch.Tensor:
    bg = np.asarray(background)
    bg = bg.astype(np.float32) / 255.0 if bg.dtype == np.uint8 else bg.astype(np.float32)
    t = to_chw(bg)
    if tuple(t.shape[-2:]) != tuple(frame_size):
        log.warning("resizing background from %s to %s", tuple(t.shape[-2:]), tuple(frame_size))
        t = F.interpolate(t[None], size=tuple(frame_size), mode="bilinear", align_corners=False)[0]
    return t


def generate_video(motion: Sequence[Pose], library: AppearanceLibrary, background: np.ndarray,
                   layout_checkpoint: str | Path, appearance_checkpoint: str | Path,
                   out_dir: str | Path, erode: int = 0) -> dict:
    """Render one frame per motion pose and write frames, maps and a manifest.

    Each frame: per-part selection and normalization from ``library``,
    layout generation, appearance generation, shadow rendering on
    ``background`` and composition. Generated layouts and foregrounds are
    fed back as history; the first two frames start from zeros.
    """
    if not motion:
        raise ShapeMismatch("no motion frames given")
    for part, entries in library.entries.items():
        if not entries:
            raise EmptyLibrary(f"no {part.value} entries")
    G, lcfg, lpath = load_layout_generator(layout_checkpoint)
    A, acfg, apath = load_appearance_generator(appearance_checkpoint)
    frame_size = motion[0].frame_size
    for cfg in (lcfg, acfg):
        cfg.net.validate(frame_size)
    records = [make_condition_record(k, pose, library, lcfg.pose_sigma) for k, pose in enumerate(motion)]
    cond = condition_tensors(records)
    bg = prepare_background(background, frame_size)

    layout = layout_rollout(G, cond)
    mask = erode_mask(fg_mask_from_layout(layout), erode)
    fg, shadow, images, _ = appearance_rollout(A, cond, layout, bg, mask)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = layout.argmax(dim=1).numpy().astype(np.uint8)
    frames = []
    for k, rec in enumerate(records):
        write_rgb_png(out / f"frame_{k:04d}.png", _to_u8(images[k]))
        write_rgb_png(out / f"foreground_{k:04d}.png", _to_u8(fg[k]))
        write_layout_png(out / f"layout_{k:04d}.png", labels[k])
        write_shadow(out / f"shadow_{k:04d}.raw", shadow[k, 0].numpy().astype(np.float32))
        frames.append({"frame": k, "selected": rec.selected, "sources": rec.sources})
    manifest = {
        "checkpoints": {
            "layout": {"path": str(lpath), "sha256": file_sha256(lpath)},
            "appearance": {"path": str(apath), "sha256": file_sha256(apath)},
        },
        "config_hash": hashlib.sha256((lcfg.dumps() + acfg.dumps()).encode()).hexdigest(),
        "background_sha256": hashlib.sha256(np.ascontiguousarray(background).tobytes()).hexdigest(),
        "library_sources": library.source_tags,
        "erode": erode,
        "n_frames": len(records),
        "frames": frames,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
