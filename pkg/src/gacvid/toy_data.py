"""Synthetic solo-dance clips with exact pose, layout and shadow ground truth.

A clip is an articulated stick figure (capsule limbs, disc head) wearing
flat-coloured garments, dancing in front of a static procedural background
with a soft elliptical ground shadow under its feet.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .core_types import CLASS_PALETTE, FrameRecord, Pose
from .errors import FormatError, GacError, InvalidSpec, OddLength

log = logging.getLogger(__name__)

DATASET_FORMAT = "gacvid-dataset"
DATASET_VERSION = 1
SHADOW_MAGIC = b"GACSHDW1"

ANGLE_NAMES = (
    "torso", "head",
    "r_upper", "r_lower", "l_upper", "l_lower",
    "r_thigh", "r_shin", "l_thigh", "l_shin",
)

# Rest angles (radians, measured from straight down; positive turns toward +x).
_REST = {
    "torso": 0.0, "head": 0.0,
    "r_upper": -0.35, "r_lower": -0.2, "l_upper": 0.35, "l_lower": 0.2,
    "r_thigh": -0.12, "r_shin": -0.05, "l_thigh": 0.12, "l_shin": 0.05,
}


@dataclass
class ClipStyle:
    hair: tuple[int, int, int] = (40, 25, 10)
    skin: tuple[int, int, int] = (224, 172, 140)
    top: tuple[int, int, int] = (200, 30, 40)
    bottom: tuple[int, int, int] = (30, 40, 150)
    shoe: tuple[int, int, int] = (20, 20, 20)
    sock: tuple[int, int, int] = (240, 240, 240)
    limb_width: float = 1.0
    body_scale: float = 1.0
    background_pattern: int = 0
    background_colors: tuple[tuple[int, int, int], tuple[int, int, int]] = ((170, 180, 190), (110, 100, 90))


@dataclass
class MotionParams:
    """Sinusoidal joint-angle trajectory: ``base + amp * sin(2 pi f t + phase)``."""

    cycles: float = 1.0  # oscillation cycles over the whole clip
    root_amp: tuple[float, float] = (0.0, 0.0)  # fraction of (W, H)
    root_phase: tuple[float, float] = (0.0, 0.0)
    angles: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    def angle(self, name: str, phase_t: float) -> float:
        base, amp, phase = self.angles.get(name, (0.0, 0.0, 0.0))
        return _REST[name] + base + amp * math.sin(phase_t + phase)


@dataclass
class ClipSpec:
    seed: int = 0
    n_frames: int = 48
    frame_size: tuple[int, int] = (128, 96)
    person: str = "person_000"
    style: ClipStyle = field(default_factory=ClipStyle)
    motion: MotionParams = field(default_factory=MotionParams)
    light_direction: tuple[float, float] = (0.6, 0.8)

    def validate(self) -> None:
        if self.n_frames < 6:
            raise InvalidSpec(f"n_frames must be >= 6, got {self.n_frames}")
        h, w = self.frame_size
        if h <= 0 or w <= 0 or h % 16 or w % 16:
            raise InvalidSpec(f"frame_size {self.frame_size} must be positive multiples of 16")
        if not math.isclose(math.hypot(*self.light_direction), 1.0, abs_tol=1e-6):
            raise InvalidSpec("light_direction must be a unit vector")

    def to_json(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_json(cls, obj: dict) -> "ClipSpec":
        try:
            style = ClipStyle(**{
                k: (tuple(tuple(c) for c in v) if k == "background_colors" else tuple(v) if isinstance(v, list) else v)
                for k, v in obj["style"].items()
            })
            m = obj["motion"]
            motion = MotionParams(
                cycles=m["cycles"],
                root_amp=tuple(m["root_amp"]),
                root_phase=tuple(m["root_phase"]),
                angles={k: tuple(v) for k, v in m["angles"].items()},
            )
            return cls(
                seed=obj["seed"],
                n_frames=obj["n_frames"],
                frame_size=tuple(obj["frame_size"]),
                person=obj["person"],
                style=style,
                motion=motion,
                light_direction=tuple(obj["light_direction"]),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad clip meta: {exc}") from exc


@dataclass(eq=False)
class ClipRecord:
    frames: list[FrameRecord]
    background: np.ndarray  # H x W x 3 uint8, the renderer's true background
    meta: ClipSpec
    name: str = "clip_000"

    @property
    def person(self) -> str:
        return self.meta.person

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClipRecord):
            return NotImplemented
        if self.name != other.name or self.meta != other.meta or len(self.frames) != len(other.frames):
            return False
        if not np.array_equal(self.background, other.background):
            return False
        for a, b in zip(self.frames, other.frames):
            if a.frame_id != b.frame_id or a.source != b.source or a.pose != b.pose:
                return False
            if not (np.array_equal(a.image, b.image) and np.array_equal(a.layout, b.layout)):
                return False
            if (a.shadow is None) != (b.shadow is None):
                return False
            if a.shadow is not None and not np.array_equal(a.shadow, b.shadow):
                return False
        return True


def random_clip_spec(seed: int, n_frames: int = 48, frame_size: tuple[int, int] = (128, 96),
                     person: str | None = None) -> ClipSpec:
    """Draw a person style and dance motion from ``seed``."""
    rng = np.random.default_rng(seed)

    def color(lo=0, hi=256):
        return tuple(int(v) for v in rng.integers(lo, hi, size=3))

    skin_tones = [(241, 194, 167), (224, 172, 140), (198, 134, 96), (141, 85, 54), (90, 56, 37)]
    style = ClipStyle(
        hair=color(0, 120),
        skin=skin_tones[int(rng.integers(len(skin_tones)))],
        top=color(),
        bottom=color(),
        shoe=color(0, 90),
        sock=color(180, 256),
        limb_width=float(rng.uniform(0.9, 1.15)),
        body_scale=float(rng.uniform(0.85, 0.95)),
        background_pattern=int(rng.integers(3)),
        background_colors=(color(120, 230), color(40, 160)),
    )
    angles = {}
    for name in ANGLE_NAMES:
        big = name.endswith(("upper", "lower"))
        amp = rng.uniform(0.3, 0.8) if big else rng.uniform(0.05, 0.3)
        if name == "torso":
            amp = rng.uniform(0.03, 0.12)
        angles[name] = (float(rng.uniform(-0.1, 0.1)), float(amp), float(rng.uniform(0, 2 * math.pi)))
    motion = MotionParams(
        cycles=float(rng.integers(1, 3)),
        root_amp=(float(rng.uniform(0.16, 0.22)), float(rng.uniform(0.0, 0.02))),
        root_phase=(float(rng.uniform(0, 2 * math.pi)), float(rng.uniform(0, 2 * math.pi))),
        angles=angles,
    )
    theta = rng.uniform(-0.8, 0.8)
    light = (float(math.sin(theta)), float(math.cos(theta)))
    return ClipSpec(seed=seed, n_frames=n_frames, frame_size=tuple(frame_size),
                    person=person or f"person_{seed:03d}", style=style, motion=motion,
                    light_direction=light)


# -- rendering -----------------------------------------------------------------

def _dir(angle: float) -> np.ndarray:
    """Unit vector for an angle measured from straight down (image y grows down)."""
    return np.array([math.sin(angle), math.cos(angle)])


def skeleton(spec: ClipSpec, t: int) -> np.ndarray:
    """21 x 2 joint positions for frame ``t``."""
    h, w = spec.frame_size
    m = spec.motion
    u = h / 128.0 * spec.style.body_scale
    ph = 2 * math.pi * m.cycles * t / spec.n_frames
    root = np.array([
        w / 2 + m.root_amp[0] * w * math.sin(ph + m.root_phase[0]),
        0.86 * h - 43 * u + m.root_amp[1] * h * math.sin(2 * ph + m.root_phase[1]),
    ])
    p = np.zeros((21, 2))
    p[12] = root
    up = -_dir(m.angle("torso", ph))
    side = np.array([-up[1], up[0]])  # perpendicular, points toward +x when upright
    p[5] = root + 30 * u * up
    # head
    hd = -_dir(m.angle("torso", ph) + m.angle("head", ph))
    hn = np.array([-hd[1], hd[0]])
    p[0] = p[5] + 11 * u * hd
    p[1] = p[0] + 2.5 * u * hd - 3 * u * hn
    p[2] = p[0] + 2.5 * u * hd + 3 * u * hn
    p[3] = p[1] - 3 * u * hn - 1.5 * u * hd
    p[4] = p[2] + 3 * u * hn - 1.5 * u * hd
    # arms: right chain 6-8 on -side, left chain 9-11 on +side
    for sh, el, wr, sgn, a1, a2 in ((6, 7, 8, -1, "r_upper", "r_lower"), (9, 10, 11, 1, "l_upper", "l_lower")):
        p[sh] = p[5] + sgn * 9 * u * side + 2 * u * (-up)
        ang1 = m.angle(a1, ph)
        p[el] = p[sh] + 15 * u * _dir(ang1)
        p[wr] = p[el] + 13 * u * _dir(ang1 + m.angle(a2, ph))
    # legs: right chain 13-16, left chain 17-20
    for hip, kn, an, toe, sgn, a1, a2 in ((13, 14, 15, 16, -1, "r_thigh", "r_shin"),
                                           (17, 18, 19, 20, 1, "l_thigh", "l_shin")):
        p[hip] = root + sgn * 5 * u * side
        ang1 = m.angle(a1, ph)
        p[kn] = p[hip] + 21 * u * _dir(ang1)
        p[an] = p[kn] + 19 * u * _dir(ang1 + m.angle(a2, ph))
        p[toe] = p[an] + 6 * u * np.array([sgn, 0.35])
    # keep every joint inside the frame by shifting the whole figure
    margin = 2.0
    lo = np.array([margin, margin]) - p.min(axis=0)
    hi = np.array([w - 1 - margin, h - 1 - margin]) - p.max(axis=0)
    p += np.clip(0.0, lo, hi)
    return p


def _capsule(xs, ys, a, b, r) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = b - a
    dd = float(d @ d)
    px, py = xs - a[0], ys - a[1]
    if dd == 0:
        t = 0.0
    else:
        t = np.clip((px * d[0] + py * d[1]) / dd, 0.0, 1.0)
    dx, dy = px - t * d[0], py - t * d[1]
    return dx * dx + dy * dy <= r * r


def render_layout(p: np.ndarray, spec: ClipSpec) -> np.ndarray:
    h, w = spec.frame_size
    u = h / 128.0 * spec.style.body_scale
    lw = u * spec.style.limb_width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    lay = np.zeros((h, w), dtype=np.uint8)

    def paint(mask, cls):
        lay[mask] = cls

    # legs (shin skin, socks, shoes, thighs in bottoms)
    for hip, kn, an, toe, leg_cls, shoe_cls in ((13, 14, 15, 16, 9, 11), (17, 18, 19, 20, 8, 10)):
        paint(_capsule(xs, ys, p[kn], p[an], 3.0 * lw), leg_cls)
        sock_top = p[an] + 0.3 * (p[kn] - p[an])
        paint(_capsule(xs, ys, sock_top, p[an], 3.2 * lw), 12)
        paint(_capsule(xs, ys, p[an], p[toe], 3.0 * lw), shoe_cls)
        paint(_capsule(xs, ys, p[hip], p[kn], 4.2 * lw), 7)
    paint(_capsule(xs, ys, p[13], p[17], 5.0 * lw), 7)
    # neck skin, torso
    paint(_capsule(xs, ys, p[5], p[5] + 0.45 * (p[0] - p[5]), 3.0 * lw), 4)
    paint(_capsule(xs, ys, p[5] + 0.15 * (p[12] - p[5]), p[12], 8.0 * lw), 3)
    paint(_capsule(xs, ys, p[6], p[9], 4.0 * lw), 3)
    # arms: forearm skin, sleeves
    for sh, el, wr, cls in ((6, 7, 8, 6), (9, 10, 11, 5)):
        paint(_capsule(xs, ys, p[el], p[wr], 2.6 * lw), cls)
        paint(_capsule(xs, ys, p[sh], p[el], 3.2 * lw), 3)
    # head: face disc with a hair cap on the side away from the neck
    hd = p[0] - p[5]
    hd = hd / (np.linalg.norm(hd) + 1e-12)
    centre = p[0] + 1.0 * u * hd
    disc = _capsule(xs, ys, centre, centre, 7.5 * u)
    cap = ((xs - centre[0]) * hd[0] + (ys - centre[1]) * hd[1]) > 1.5 * u
    paint(disc, 2)
    paint(disc & cap, 1)
    return lay


def render_background(spec: ClipSpec) -> np.ndarray:
    h, w = spec.frame_size
    rng = np.random.default_rng(spec.seed + 7919)
    c0 = np.array(spec.style.background_colors[0], dtype=np.float64)
    c1 = np.array(spec.style.background_colors[1], dtype=np.float64)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pattern = spec.style.background_pattern
    if pattern == 0:  # wall gradient plus floor with tile seams
        wall = ys / h
        img = c0 * (1 - 0.3 * wall[..., None])
        floor = ys >= 0.7 * h
        seams = (np.mod(xs + 0.5 * (ys - 0.7 * h), 16) < 1) & floor
        img = np.where(floor[..., None], c1, img)
        img = np.where(seams[..., None], c1 * 0.7, img)
    elif pattern == 1:  # diagonal stripes
        stripes = (np.mod(xs + ys, 20) < 10)[..., None]
        img = np.where(stripes, c0, 0.5 * (c0 + c1))
        img = np.where((ys >= 0.72 * h)[..., None], c1, img)
    else:  # smooth blotches from upsampled noise
        coarse = rng.uniform(0, 1, size=(h // 16 + 2, w // 16 + 2))
        from scipy.ndimage import zoom

        fine = zoom(coarse, 16, order=3)[:h, :w]
        fine = np.clip(fine, 0, 1)[..., None]
        img = c0 * fine + c1 * (1 - fine)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_shadow(p: np.ndarray, spec: ClipSpec) -> np.ndarray:
    """Brightness multiplier in [0.45, 1], exactly 1 outside the ellipse."""
    h, w = spec.frame_size
    u = h / 128.0 * spec.style.body_scale
    feet = 0.5 * (p[15] + p[19])
    lx, ly = spec.light_direction
    cx = feet[0] + 6 * u * lx
    cy = feet[1] + 3 * u + 2 * u * ly
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    r2 = ((xs - cx) / (13 * u)) ** 2 + ((ys - cy) / (4 * u)) ** 2
    g = np.clip(1 - r2, 0, None) ** 2
    return (1.0 - 0.55 * g).astype(np.float32)


def compose_frame(background: np.ndarray, shadow: np.ndarray, layout: np.ndarray,
                  colors: np.ndarray) -> np.ndarray:
    shaded = np.rint(background.astype(np.float64) * shadow[..., None].astype(np.float64))
    img = np.where((layout > 0)[..., None], colors[layout], shaded)
    return np.clip(img, 0, 255).astype(np.uint8)


def class_colors(style: ClipStyle) -> np.ndarray:
    table = np.zeros((13, 3), dtype=np.float64)
    table[1] = style.hair
    table[2] = style.skin
    table[3] = style.top
    table[4] = style.skin
    table[5] = table[6] = np.array(style.skin) * 0.92
    table[7] = style.bottom
    table[8] = table[9] = np.array(style.skin) * 0.88
    table[10] = table[11] = style.shoe
    table[12] = style.sock
    return np.rint(table)


def synth_clip(spec: ClipSpec, name: str | None = None) -> ClipRecord:
    """Render ``spec`` deterministically."""
    spec.validate()
    background = render_background(spec)
    colors = class_colors(spec.style)
    frames = []
    for t in range(spec.n_frames):
        p = skeleton(spec, t)
        layout = render_layout(p, spec)
        shadow = render_shadow(p, spec)
        image = compose_frame(background, shadow, layout, colors)
        frames.append(FrameRecord(t, image, Pose.from_xy(p, spec.frame_size), layout, shadow, spec.person))
    return ClipRecord(frames, background, spec, name or f"clip_{spec.seed:03d}")


def synth_corpus(n_train: int = 12, n_test: int = 4, n_frames: int = 48,
                 frame_size: tuple[int, int] = (128, 96), seed: int = 0) -> dict[str, list[ClipRecord]]:
    out = {"train": [], "test": []}
    k = 0
    for split, count in (("train", n_train), ("test", n_test)):
        for _ in range(count):
            spec = random_clip_spec(seed * 1000 + k, n_frames, frame_size, person=f"person_{k:03d}")
            out[split].append(synth_clip(spec, name=f"clip_{k:03d}"))
            k += 1
    return out


# -- dataset protocol ----------------------------------------------------------

def extract_background(clip: ClipRecord | Sequence[FrameRecord]) -> np.ndarray:
    """Per-pixel median over frames where the pixel shows unshadowed background.

    Pixels that are never uncovered fall back to the median over all frames.
    """
    frames = clip.frames if isinstance(clip, ClipRecord) else list(clip)
    if len(frames) < 3:
        raise GacError("background extraction needs at least 3 frames")
    imgs = np.stack([f.image for f in frames]).astype(np.float64)
    usable = np.stack([
        (f.layout == 0) & (np.ones_like(f.layout, dtype=bool) if f.shadow is None else f.shadow >= 1.0)
        for f in frames
    ])
    masked = np.where(usable[..., None], imgs, np.nan)
    with np.errstate(all="ignore"):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(masked, axis=0)
    fallback = np.median(imgs, axis=0)
    med = np.where(np.isnan(med), fallback, med)
    return np.clip(np.rint(med), 0, 255).astype(np.uint8)


def split_clip(clip: ClipRecord) -> tuple[list[FrameRecord], list[FrameRecord]]:
    """First half drives motion, second half fills the appearance library."""
    n = len(clip.frames)
    if n % 2:
        raise OddLength(f"{clip.name} has {n} frames; halving needs an even count")
    return list(clip.frames[: n // 2]), list(clip.frames[n // 2:])


# -- on-disk layout ------------------------------------------------------------

def write_shadow(path: Path, shadow: np.ndarray) -> None:
    h, w = shadow.shape
    with open(path, "wb") as fh:
        fh.write(SHADOW_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(shadow, dtype="<f4").tobytes())


def read_shadow(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != SHADOW_MAGIC:
        raise FormatError(f"{path}: bad shadow magic")
    h, w = struct.unpack("<II", raw[8:16])
    if len(raw) != 16 + 4 * h * w:
        raise FormatError(f"{path}: truncated shadow payload")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)


def write_layout_png(path: Path, layout: np.ndarray) -> None:
    im = Image.fromarray(layout.astype(np.uint8), mode="P")
    im.putpalette([c for rgb in CLASS_PALETTE for c in rgb])
    im.save(path)


def read_layout_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "P":
            raise FormatError(f"{path}: layout must be a palette PNG")
        return np.array(im, dtype=np.uint8)


def write_rgb_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)


def read_rgb_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def write_dataset(clips: Sequence[ClipRecord] | dict[str, Sequence[ClipRecord]], root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    groups = clips if isinstance(clips, dict) else {"train": clips}
    manifest = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "clips": []}
    for split, items in groups.items():
        for clip in items:
            cdir = root / clip.name
            cdir.mkdir(exist_ok=True)
            for f in clip.frames:
                k = f.frame_id
                write_rgb_png(cdir / f"frame_{k:04d}.png", f.image)
                write_layout_png(cdir / f"layout_{k:04d}.png", f.layout)
                (cdir / f"pose_{k:04d}.json").write_text(json.dumps(f.pose.to_json()))
                if f.shadow is not None:
                    write_shadow(cdir / f"shadow_{k:04d}.raw", f.shadow)
            write_rgb_png(cdir / "background.png", clip.background)
            (cdir / "meta.json").write_text(json.dumps(clip.meta.to_json(), indent=1, sort_keys=True))
            manifest["clips"].append({
                "name": clip.name,
                "split": split,
                "person": clip.person,
                "n_frames": len(clip.frames),
                "frame_ids": [f.frame_id for f in clip.frames],
            })
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a gacvid dataset manifest")
    if manifest.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {manifest.get('version')!r}")
    if not isinstance(manifest.get("clips"), list):
        raise FormatError(f"{path}: missing clip list")
    return manifest


def read_clip(cdir: Path, entry: dict) -> ClipRecord:
    meta = ClipSpec.from_json(json.loads((cdir / "meta.json").read_text()))
    frames = []
    for k in entry["frame_ids"]:
        pose = Pose.from_json(json.loads((cdir / f"pose_{k:04d}.json").read_text()))
        shadow_path = cdir / f"shadow_{k:04d}.raw"
        shadow = read_shadow(shadow_path) if shadow_path.exists() else None
        frames.append(FrameRecord(
            k,
            read_rgb_png(cdir / f"frame_{k:04d}.png"),
            pose,
            read_layout_png(cdir / f"layout_{k:04d}.png"),
            shadow,
            entry.get("person", meta.person),
        ))
    return ClipRecord(frames, read_rgb_png(cdir / "background.png"), meta, entry["name"])


def read_dataset(root: str | Path, split: str | None = None) -> list[ClipRecord]:
    """Load every clip (or only those in ``split``) listed in the manifest."""
    root = Path(root)
    manifest = read_manifest(root)
    clips = []
    for entry in manifest["clips"]:
        if split is not None and entry.get("split") != split:
            continue
        try:
            clips.append(read_clip(root / entry["name"], entry))
        except KeyError as exc:
            raise FormatError(f"manifest entry missing {exc}") from exc
    return clips
