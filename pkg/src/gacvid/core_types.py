"""Domain types, class/part taxonomies and the pose-vector tables.

Conventions used everywhere in the package:

* images are ``H x W x 3`` arrays, ``uint8`` on disk and ``float`` in [0, 1]
  in memory once they enter the networks;
* layouts are ``H x W`` integer class maps (0 = background);
* pose coordinates are ``(x, y)`` in pixels with pixel centres on integers,
  ``x`` indexing columns and ``y`` rows.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ConfigError

N_POINTS = 21
N_CLASSES = 13  # 12 foreground classes + background
N_FG_CLASSES = 12

CLASS_NAMES = (
    "background",
    "hair",
    "face",
    "tops",
    "torso-skin",
    "left-arm",
    "right-arm",
    "bottoms",
    "left-leg",
    "right-leg",
    "left-shoe",
    "right-shoe",
    "socks",
)

# Palette used when writing layouts as indexed PNGs.
CLASS_PALETTE = (
    (0, 0, 0),
    (128, 0, 0),
    (255, 85, 0),
    (255, 170, 0),
    (85, 51, 0),
    (51, 170, 221),
    (0, 255, 255),
    (0, 85, 85),
    (170, 255, 85),
    (85, 255, 170),
    (255, 255, 0),
    (255, 170, 255),
    (0, 0, 255),
)


class BodyPart(enum.Enum):
    HEAD = "head"
    UPPER = "upper"
    LOWER = "lower"

    @property
    def vector_table(self) -> tuple[tuple[int, int], ...]:
        return _VECTOR_TABLES[self]

    @property
    def point_set(self) -> tuple[int, ...]:
        return _POINT_SETS[self]

    @property
    def classes(self) -> tuple[int, ...]:
        return _PART_CLASSES[self]

    @property
    def owned_points(self) -> tuple[int, ...]:
        """Point indices this part contributes to a composite pose."""
        return _OWNED_POINTS[self]

    @property
    def index(self) -> int:
        return PARTS.index(self)


PARTS = (BodyPart.HEAD, BodyPart.UPPER, BodyPart.LOWER)

_VECTOR_TABLES = {
    BodyPart.HEAD: ((0, 1), (0, 2), (1, 3), (2, 4), (0, 5)),
    BodyPart.UPPER: ((5, 6), (6, 7), (7, 8), (5, 9), (9, 10), (10, 11), (5, 12)),
    BodyPart.LOWER: (
        (12, 13), (13, 14), (14, 15), (15, 16),
        (12, 17), (17, 18), (18, 19), (19, 20),
    ),
}

_POINT_SETS = {
    BodyPart.HEAD: tuple(range(0, 6)),
    BodyPart.UPPER: tuple(range(5, 13)),
    BodyPart.LOWER: tuple(range(12, 21)),
}

# Shared joints: P5 belongs to the head fragment, P12 to the upper fragment.
_OWNED_POINTS = {
    BodyPart.HEAD: tuple(range(0, 6)),
    BodyPart.UPPER: tuple(range(6, 13)),
    BodyPart.LOWER: tuple(range(13, 21)),
}

_PART_CLASSES = {
    BodyPart.HEAD: (1, 2),
    BodyPart.UPPER: (3, 4, 5, 6),
    BodyPart.LOWER: (7, 8, 9, 10, 11, 12),
}

# Channel offset of each part's group inside the 12-channel layout tensor.
PART_CHANNEL_SLICES = {
    BodyPart.HEAD: slice(0, 2),
    BodyPart.UPPER: slice(2, 6),
    BodyPart.LOWER: slice(6, 12),
}

# Channel slice of each part's RGB group in the 9-channel foreground tensor.
PART_RGB_SLICES = {
    BodyPart.HEAD: slice(0, 3),
    BodyPart.UPPER: slice(3, 6),
    BodyPart.LOWER: slice(6, 9),
}


def part_of_class(class_id: int) -> BodyPart | None:
    for part in PARTS:
        if class_id in part.classes:
            return part
    return None


@dataclass(frozen=True, eq=False)
class Pose:
    """21 two-dimensional keypoints with a visibility flag each.

    Invisible points are stored as ``(0, 0)`` with ``visible=False``.
    Construction does not validate; use :func:`validate_pose`.
    """

    xy: np.ndarray
    visible: np.ndarray
    frame_size: tuple[int, int]

    def __post_init__(self):
        xy = np.array(self.xy, dtype=np.float64).reshape(-1, 2)
        vis = np.array(self.visible, dtype=bool).reshape(-1)
        xy[~vis] = 0.0
        xy.flags.writeable = False
        vis.flags.writeable = False
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "frame_size", (int(self.frame_size[0]), int(self.frame_size[1])))

    @classmethod
    def from_points(cls, points: Sequence[Sequence[float]], frame_size: tuple[int, int]) -> "Pose":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(pts[:, :2], pts[:, 2] > 0, frame_size)

    @classmethod
    def from_xy(cls, xy: np.ndarray, frame_size: tuple[int, int]) -> "Pose":
        xy = np.asarray(xy, dtype=np.float64)
        return cls(xy, np.ones(len(xy), dtype=bool), frame_size)

    def __len__(self) -> int:
        return len(self.xy)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return (
            self.frame_size == other.frame_size
            and np.array_equal(self.xy, other.xy)
            and np.array_equal(self.visible, other.visible)
        )

    def __hash__(self):
        return hash((self.frame_size, self.xy.tobytes(), self.visible.tobytes()))

    def replace_xy(self, xy: np.ndarray) -> "Pose":
        return Pose(xy, self.visible, self.frame_size)

    def part_visible(self, part: BodyPart) -> bool:
        return bool(self.visible[list(part.point_set)].all())

    def to_json(self) -> dict:
        points = [[float(x), float(y), int(v)] for (x, y), v in zip(self.xy, self.visible)]
        return {"points": points, "h": self.frame_size[0], "w": self.frame_size[1]}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Pose":
        return cls.from_points(obj["points"], (obj["h"], obj["w"]))


def validate_pose(pose: Pose) -> list[str]:
    """Return human-readable invariant violations; empty when the pose is valid."""
    problems = []
    h, w = pose.frame_size
    if h <= 0 or w <= 0:
        problems.append(f"frame_size must be positive, got {pose.frame_size}")
    if len(pose) != N_POINTS:
        problems.append(f"count≠21: got {len(pose)} points")
    for k, ((x, y), vis) in enumerate(zip(pose.xy, pose.visible)):
        if not vis:
            continue
        if not (0 <= x < w):
            problems.append(f"P{k}: x={x:g} outside [0, {w})")
        if not (0 <= y < h):
            problems.append(f"P{k}: y={y:g} outside [0, {h})")
    return problems


@dataclass(eq=False)
class FrameRecord:
    """One video frame with its ground truth annotations."""

    frame_id: int
    image: np.ndarray  # H x W x 3 uint8
    pose: Pose
    layout: np.ndarray  # H x W uint8 class ids
    shadow: np.ndarray | None = None  # H x W float32 multiplier, synthetic clips only
    source: str = ""

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.layout.shape[0], self.layout.shape[1]


def validate_layout(layout: np.ndarray) -> bool:
    return bool(np.issubdtype(layout.dtype, np.integer) and layout.min(initial=0) >= 0
                and layout.max(initial=0) < N_CLASSES)


def part_mask(layout: np.ndarray, part: BodyPart) -> np.ndarray:
    return np.isin(layout, part.classes)


def layout_to_part_tensor(layout: np.ndarray) -> np.ndarray:
    """H x W class map -> H x W x 12 binary tensor (channel k holds class k+1)."""
    classes = np.arange(1, N_CLASSES, dtype=layout.dtype)
    return (layout[..., None] == classes).astype(np.uint8)


def part_tensor_to_layout(channels: np.ndarray) -> np.ndarray:
    """Collapse a 12-channel tensor back into a class map.

    Pixels with no active channel are background; where several are active the
    lowest class id wins.
    """
    active = channels.astype(bool)
    first = np.argmax(active, axis=-1) + 1
    return np.where(active.any(axis=-1), first, 0).astype(np.uint8)


def part_foreground(image: np.ndarray, layout: np.ndarray, part: BodyPart) -> np.ndarray:
    """Part foreground in [0, 1]: image multiplied by the part's binary mask."""
    img = image.astype(np.float64) / 255.0 if image.dtype == np.uint8 else image.astype(np.float64)
    return img * part_mask(layout, part)[..., None]


@dataclass(eq=False)
class PartCondition:
    """Pose, layout channels and foreground of one body part."""

    part: BodyPart
    pose: Pose  # full 21-point pose; only ``part.point_set`` is meaningful
    layout: np.ndarray  # H x W x len(part.classes) binary
    foreground: np.ndarray  # H x W x 3 in [0, 1]
    frame_id: int = -1
    source: str = ""

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.layout.shape[0], self.layout.shape[1]


@dataclass(eq=False)
class AppearanceCondition:
    """The selected, normalized target appearance bundle for one frame."""

    parts: dict[BodyPart, PartCondition]
    composite_pose: Pose
    layout: np.ndarray  # X_TLO: H x W x 12 uint8
    foreground: np.ndarray  # X_TFG: H x W x 9 float

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.layout.shape[0], self.layout.shape[1]

    @property
    def sources(self) -> dict[str, dict]:
        return {
            p.value: {"source": c.source, "frame_id": int(c.frame_id)}
            for p, c in self.parts.items()
        }


def check_shadow_map(shadow: np.ndarray) -> bool:
    return bool(np.all((shadow > 0) & (shadow < 1)))


@dataclass
class FrameWindow:
    """Inputs for generating frame ``t`` (history slots are zero when missing)."""

    source_pose: list  # three arrays for t-2, t-1, t
    condition: list  # three entries for t-2, t-1, t
    prev_layouts: list  # two arrays for t-2, t-1
    prev_foregrounds: list  # two arrays for t-2, t-1

    @staticmethod
    def pick(seq: Sequence, t: int, offsets: Sequence[int], zero) -> list:
        out = []
        for off in offsets:
            k = t - off
            out.append(seq[k] if 0 <= k < len(seq) and seq[k] is not None else zero)
        return out


@dataclass
class NetConfig:
    base_filters: int = 32
    n_downsamples: int = 3
    n_resblocks: int = 4
    max_filters: int = 256
    n_disc_scales: int = 3
    n_disc_layers: int = 4
    n_temporal_scales: int = 3
    ac_patch: int = 48

    def validate(self, frame_size: tuple[int, int] | None = None) -> None:
        if self.base_filters < 8:
            raise ConfigError(f"base_filters must be >= 8, got {self.base_filters}")
        if self.n_downsamples < 1:
            raise ConfigError("n_downsamples must be >= 1")
        if self.n_resblocks < 0 or self.n_disc_scales < 1 or self.n_temporal_scales < 1:
            raise ConfigError("block and scale counts must be positive")
        if frame_size is not None:
            f = 2 ** self.n_downsamples
            if frame_size[0] % f or frame_size[1] % f:
                raise ConfigError(
                    f"frame size {tuple(frame_size)} not divisible by 2^{self.n_downsamples}={f}"
                )


@dataclass
class TrainingConfig:
    learning_rate: float = 0.0002
    batch_size: int = 4
    epochs: int = 10
    max_steps: int | None = None
    lambda_ac: float = 5.0
    lambda_ss: float = 10.0
    lambda_t: float = 10.0
    lambda_fm: float = 10.0
    lambda_vgg: float = 10.0
    beta1: float = 0.5
    beta2: float = 0.999
    frame_size: tuple[int, int] = (128, 96)
    seed: int = 0
    temporal_strides: tuple[int, ...] = (1, 2, 4)
    pose_sigma: float = 3.0
    checkpoint_every: int = 0
    net: NetConfig = field(default_factory=NetConfig)

    VERSION = 1

    def validate(self) -> None:
        lams = [self.lambda_ac, self.lambda_ss, self.lambda_t, self.lambda_fm, self.lambda_vgg]
        if any(not np.isfinite(v) or v < 0 for v in lams):
            raise ConfigError("all loss weights must be finite and >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if not self.temporal_strides or min(self.temporal_strides) < 1:
            raise ConfigError("temporal_strides must be positive integers")
        if self.pose_sigma <= 0:
            raise ConfigError("pose_sigma must be > 0")
        self.net.validate(self.frame_size)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["frame_size"] = list(self.frame_size)
        out["temporal_strides"] = list(self.temporal_strides)
        out["version"] = self.VERSION
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "TrainingConfig":
        obj = dict(obj)
        version = obj.pop("version", None)
        if version != cls.VERSION:
            raise ConfigError(f"unsupported training config version {version!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        net = obj.pop("net", {})
        net_known = {f.name for f in dataclasses.fields(NetConfig)}
        bad = sorted(set(net) - net_known)
        if bad:
            raise ConfigError(f"unknown network config keys: {bad}")
        if "frame_size" in obj:
            obj["frame_size"] = tuple(obj["frame_size"])
        if "temporal_strides" in obj:
            obj["temporal_strides"] = tuple(obj["temporal_strides"])
        try:
            cfg = cls(**obj, net=NetConfig(**net))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)
