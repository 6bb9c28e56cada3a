"""Appearance libraries, per-part input selection and condition assembly."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core_types import (
    N_FG_CLASSES,
    N_POINTS,
    PART_CHANNEL_SLICES,
    PART_RGB_SLICES,
    PARTS,
    AppearanceCondition,
    BodyPart,
    FrameRecord,
    PartCondition,
    Pose,
    layout_to_part_tensor,
    part_mask,
)
from .errors import EmptyLibrary, FormatError, ShapeMismatch
from .pose_geometry import (
    apply_transform_raster,
    part_pose_similarity,
    part_scale_translation,
    transform_pose,
)

log = logging.getLogger(__name__)

DEFAULT_SIGMA = 3.0


def make_part_condition(frame: FrameRecord, part: BodyPart, source: str | None = None) -> PartCondition:
    layout = layout_to_part_tensor(frame.layout)[..., PART_CHANNEL_SLICES[part]]
    img = frame.image.astype(np.float64) / 255.0
    fg = img * part_mask(frame.layout, part)[..., None]
    return PartCondition(
        part=part,
        pose=frame.pose,
        layout=layout,
        foreground=fg,
        frame_id=frame.frame_id,
        source=frame.source if source is None else source,
    )


def build_library(frames: Iterable[FrameRecord], part: BodyPart, source: str | None = None) -> list[PartCondition]:
    """One library entry per frame whose part joints are all visible."""
    entries = []
    for frame in frames:
        if not frame.pose.part_visible(part):
            log.warning("skipping frame %s for %s library: missing joints", frame.frame_id, part.value)
            continue
        entries.append(make_part_condition(frame, part, source))
    if not entries:
        raise EmptyLibrary(f"no usable frames for the {part.value} library")
    return entries


@dataclass
class AppearanceLibrary:
    """Per-part appearance libraries, each possibly from a different source."""

    entries: dict[BodyPart, list[PartCondition]] = field(default_factory=dict)

    @classmethod
    def from_frames(cls, frames: Sequence[FrameRecord], source: str | None = None) -> "AppearanceLibrary":
        return cls({part: build_library(frames, part, source) for part in PARTS})

    @classmethod
    def from_sources(cls, per_part: dict[BodyPart, Sequence[FrameRecord]],
                     tags: dict[BodyPart, str] | None = None) -> "AppearanceLibrary":
        tags = tags or {}
        return cls({part: build_library(per_part[part], part, tags.get(part)) for part in PARTS})

    def __getitem__(self, part: BodyPart) -> list[PartCondition]:
        if part not in self.entries or not self.entries[part]:
            raise EmptyLibrary(f"no {part.value} entries")
        return self.entries[part]

    @property
    def source_tags(self) -> dict[str, list[str]]:
        return {p.value: sorted({e.source for e in es}) for p, es in self.entries.items()}


def select_part_condition(src: Pose, library: Sequence[PartCondition], part: BodyPart) -> int:
    """Index of the entry whose part pose is most similar to ``src``.

    Ties go to the entry with the lowest frame id.
    """
    if not library:
        raise EmptyLibrary(f"empty {part.value} library")
    best, best_key = -1, None
    for k, entry in enumerate(library):
        sim = part_pose_similarity(src, entry.pose, part)
        key = (-sim, entry.frame_id)
        if best_key is None or key < best_key:
            best, best_key = k, key
    return best


def normalize_selected(src: Pose, entry: PartCondition, part: BodyPart) -> PartCondition:
    """Scale and shift the selected part so it matches ``src``'s part."""
    tf = part_scale_translation(src, entry.pose, part)
    layout = apply_transform_raster(entry.layout, tf, mode="nearest")
    fg = apply_transform_raster(entry.foreground, tf, mode="bilinear")
    # bilinear sampling bleeds past the warped mask edge; keep channels disjoint
    fg = np.clip(fg, 0.0, 1.0) * layout.any(axis=-1, keepdims=True)
    pose = transform_pose(entry.pose, tf, part.point_set)
    return PartCondition(part, pose, layout, fg, entry.frame_id, entry.source)


def assemble_condition(src: Pose, parts: dict[BodyPart, PartCondition]) -> AppearanceCondition:
    """Stack the three normalized parts into X_TP, X_TLO and X_TFG."""
    sizes = {p.frame_size for p in parts.values()}
    if len(sizes) != 1 or set(parts) != set(PARTS):
        raise ShapeMismatch(f"part conditions disagree on frame size: {sorted(sizes)}")
    (h, w), = sizes
    if (h, w) != src.frame_size:
        raise ShapeMismatch(f"source frame {src.frame_size} vs conditions {(h, w)}")
    xy = np.zeros((N_POINTS, 2))
    vis = np.zeros(N_POINTS, dtype=bool)
    layout = np.zeros((h, w, N_FG_CLASSES), dtype=np.uint8)
    fg = np.zeros((h, w, 9), dtype=np.float64)
    for part in PARTS:
        pc = parts[part]
        own = list(part.owned_points)
        xy[own] = pc.pose.xy[own]
        vis[own] = pc.pose.visible[own]
        layout[..., PART_CHANNEL_SLICES[part]] = pc.layout
        fg[..., PART_RGB_SLICES[part]] = pc.foreground
    return AppearanceCondition(dict(parts), Pose(xy, vis, (h, w)), layout, fg)


def condition_for_pose(src: Pose, library: AppearanceLibrary) -> tuple[AppearanceCondition, dict[BodyPart, int]]:
    """Select, normalize and assemble the appearance condition for one source pose."""
    chosen, parts = {}, {}
    for part in PARTS:
        entries = library[part]
        k = select_part_condition(src, entries, part)
        chosen[part] = k
        parts[part] = normalize_selected(src, entries[k], part)
    return assemble_condition(src, parts), chosen


def rasterize_pose(pose: Pose, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Per-joint Gaussian heatmaps, ``H x W x 21``; invisible joints give zeros."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    h, w = pose.frame_size
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros((h, w, len(pose)), dtype=np.float64)
    for j, ((x, y), vis) in enumerate(zip(pose.xy, pose.visible)):
        if vis:
            out[..., j] = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma**2))
    return out


# -- persisted conditions ----------------------------------------------------

@dataclass(eq=False)
class ConditionRecord:
    """Network-ready tensors for one motion frame (float32, channels last)."""

    frame_id: int
    source_pose: np.ndarray  # H x W x 21
    target_pose: np.ndarray  # H x W x 21
    layout: np.ndarray  # H x W x 12
    foreground: np.ndarray  # H x W x 9
    selected: dict[str, int] = field(default_factory=dict)
    sources: dict[str, dict] = field(default_factory=dict)


def make_condition_record(frame_id: int, src: Pose, library: AppearanceLibrary,
                          sigma: float = DEFAULT_SIGMA) -> ConditionRecord:
    cond, chosen = condition_for_pose(src, library)
    return ConditionRecord(
        frame_id=frame_id,
        source_pose=rasterize_pose(src, sigma).astype(np.float32),
        target_pose=rasterize_pose(cond.composite_pose, sigma).astype(np.float32),
        layout=cond.layout.astype(np.float32),
        foreground=cond.foreground.astype(np.float32),
        selected={p.value: int(k) for p, k in chosen.items()},
        sources=cond.sources,
    )


_TENSORS = ("source_pose", "target_pose", "layout", "foreground")
INDEX_VERSION = 1


def save_conditions(records: Sequence[ConditionRecord], root: str | Path, meta: dict | None = None) -> Path:
    """Write ``frame_XXXX_<tensor>.npy`` files plus ``index.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = {"version": INDEX_VERSION, "meta": meta or {}, "frames": []}
    for rec in records:
        files = {}
        for name in _TENSORS:
            fname = f"frame_{rec.frame_id:04d}_{name}.npy"
            np.save(root / fname, getattr(rec, name))
            files[name] = fname
        index["frames"].append({
            "frame_id": rec.frame_id,
            "files": files,
            "selected": rec.selected,
            "sources": rec.sources,
        })
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return root


def load_conditions(root: str | Path) -> tuple[list[ConditionRecord], dict]:
    root = Path(root)
    try:
        index = json.loads((root / "index.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt condition index in {root}: {exc}") from exc
    if index.get("version") != INDEX_VERSION:
        raise FormatError(f"unsupported condition index version {index.get('version')!r}")
    records = []
    for item in index["frames"]:
        arrays = {name: np.load(root / item["files"][name]) for name in _TENSORS}
        records.append(ConditionRecord(item["frame_id"], selected=item["selected"],
                                       sources=item["sources"], **arrays))
    return records, index.get("meta", {})
