"""Image-quality metrics and run-level evaluation reports."""

from __future__ import annotations

import json
import logging
import re
import shutil
import subprocess
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import correlate2d

from .errors import AlignmentError, ShapeMismatch, TooFewFrames
from .toy_data import read_rgb_png

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0
PSNR_CAP = 100.0


def _as_levels(img) -> np.ndarray:
    """uint8 as is; floats are taken to lie in [0, 1] and scaled to 0..255."""
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return a.astype(np.float64)
    return a.astype(np.float64) * DATA_RANGE


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise ShapeMismatch(f"expected H x W or H x W x C, got {a.shape}")


def ssim(a, b) -> float:
    """Mean structural similarity over valid 11 x 11 Gaussian windows.

    Colour images are scored per channel and averaged.
    """
    x, y = _as_levels(a), _as_levels(b)
    _check_pair(x, y)
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ShapeMismatch(f"images smaller than the {SSIM_WINDOW}px window")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    w = gaussian_window()
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    scores = []
    for ch in range(x.shape[2]):
        xc, yc = x[..., ch], y[..., ch]

        def filt(z):
            return correlate2d(z, w, mode="valid")

        mx, my = filt(xc), filt(yc)
        vx = filt(xc * xc) - mx * mx
        vy = filt(yc * yc) - my * my
        cxy = filt(xc * yc) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB on the 0..255 scale, capped at 100."""
    x, y = _as_levels(a), _as_levels(b)
    _check_pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(DATA_RANGE ** 2 / mse)))


def temporal_stability(frames: Sequence[np.ndarray]) -> float:
    """Mean absolute change between consecutive frames, in 0..255 levels."""
    if len(frames) < 2:
        raise TooFewFrames(f"need at least 2 frames, got {len(frames)}")
    arr = [_as_levels(f) for f in frames]
    return float(np.mean([np.abs(b - a).mean() for a, b in zip(arr, arr[1:])]))


_FRAME_RE = re.compile(r"^frame_(\d+)\.png$")


def list_frames(d: str | Path) -> dict[int, Path]:
    out = {}
    for p in Path(d).iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            out[int(m.group(1))] = p
    return out


def _run_plugin(cmd: str, gen_dir: Path, gt_dir: Path) -> float | None:
    """Run ``<cmd> <gen_dir> <gt_dir>``; its last stdout line is the score."""
    exe = shutil.which(cmd.split()[0])
    if exe is None:
        log.warning("metric plugin %s not found", cmd)
        return None
    try:
        res = subprocess.run(cmd.split() + [str(gen_dir), str(gt_dir)], capture_output=True, text=True,
                             check=True, timeout=600)
        return float(res.stdout.strip().splitlines()[-1])
    except (subprocess.SubprocessError, ValueError, IndexError) as exc:
        log.warning("metric plugin %s failed: %s", cmd, exc)
        return None


def evaluate_run(gen_dir: str | Path, gt_dir: str | Path, plugins: dict[str, str] | None = None,
                 out_dir: str | Path | None = None) -> dict:
    """Score generated frames against ground truth and write report.json / report.md.

    Frames pair up by index (``frame_XXXX.png``). ``plugins`` maps a metric
    name (e.g. ``"lpips"``) to an external command; metrics without a
    plugin are reported as null.
    """
    gen_dir, gt_dir = Path(gen_dir), Path(gt_dir)
    gen, gt = list_frames(gen_dir), list_frames(gt_dir)
    if not gen:
        raise AlignmentError(f"no frames in {gen_dir}")
    if set(gen) != set(gt):
        missing = sorted(set(gen) ^ set(gt))
        raise AlignmentError(f"frame indices differ between runs: {missing[:5]}")
    rows = []
    gen_frames = []
    for k in sorted(gen):
        a, b = read_rgb_png(gen[k]), read_rgb_png(gt[k])
        if a.shape != b.shape:
            raise AlignmentError(f"frame {k}: sizes {a.shape} vs {b.shape}")
        rows.append({"frame": k, "ssim": ssim(a, b), "psnr": psnr(a, b)})
        gen_frames.append(a)
    report = {
        "n_frames": len(rows),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "temporal_stability": temporal_stability(gen_frames) if len(gen_frames) > 1 else None,
        "lpips": None,
        "vfid": None,
        "frames": rows,
    }
    for name, cmd in (plugins or {}).items():
        report[name] = _run_plugin(cmd, gen_dir, gt_dir)
    out = Path(out_dir) if out_dir is not None else gen_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    (out / "report.md").write_text(report_markdown(report))
    return report


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def report_markdown(report: dict) -> str:
    lines = ["# Evaluation", "", "| metric | value |", "|---|---|"]
    for key in ("ssim", "psnr", "temporal_stability", "lpips", "vfid"):
        lines.append(f"| {key} | {_fmt(report.get(key))} |")
    lines += ["", f"{report['n_frames']} frames", ""]
    return "\n".join(lines)
