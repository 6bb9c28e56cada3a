"""Body-part pose similarity, scale/translation normalization and warping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_types import BodyPart, Pose
from .errors import DegeneratePart, MissingPoint, ShapeMismatch


@dataclass(frozen=True)
class PartTransform:
    """Uniform scale about ``center`` followed by a translation.

    ``p' = scale * (p - center) + center + translation``
    """

    scale: float
    translation: tuple[float, float]
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise DegeneratePart(f"scale must be positive and finite, got {self.scale}")

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.translation[0] == 0.0 and self.translation[1] == 0.0


def _require_visible(pose: Pose, indices) -> None:
    for k in indices:
        if not pose.visible[k]:
            raise MissingPoint(k)


def part_vectors(pose: Pose, part: BodyPart) -> np.ndarray:
    """Pose vectors of ``part`` in table order, shape ``(N_v, 2)``."""
    table = np.asarray(part.vector_table)
    _require_visible(pose, np.unique(table))
    return pose.xy[table[:, 1]] - pose.xy[table[:, 0]]


def part_points(pose: Pose, part: BodyPart) -> np.ndarray:
    _require_visible(pose, part.point_set)
    return pose.xy[list(part.point_set)]


def part_centroid(pose: Pose, part: BodyPart) -> np.ndarray:
    return part_points(pose, part).mean(axis=0)


def vector_cosines(vs: np.ndarray, vt: np.ndarray) -> np.ndarray:
    """Row-wise cosine; rows where either vector has zero length give 0."""
    ns = np.linalg.norm(vs, axis=-1)
    nt = np.linalg.norm(vt, axis=-1)
    denom = ns * nt
    dots = np.sum(vs * vt, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(cos, -1.0, 1.0)


def part_pose_similarity(src: Pose, tgt: Pose, part: BodyPart) -> float:
    """Average cosine similarity between corresponding part pose vectors."""
    cos = vector_cosines(part_vectors(src, part), part_vectors(tgt, part))
    return float(cos.mean())


def part_scale_translation(src: Pose, tgt: Pose, part: BodyPart) -> PartTransform:
    """Transform that brings ``tgt``'s part to the size and position of ``src``'s.

    Scale is the ratio of summed vector lengths (source over target) and the
    translation is the mean point difference. Scaling happens about the target
    part centroid, which scaling leaves fixed, so the mean difference is the
    same before and after scaling and the centroids coincide exactly.
    """
    len_s = np.linalg.norm(part_vectors(src, part), axis=1).sum()
    len_t = np.linalg.norm(part_vectors(tgt, part), axis=1).sum()
    if not len_t > 0:
        raise DegeneratePart(f"{part.value} of target pose has zero total vector length")
    ps, pt = part_points(src, part), part_points(tgt, part)
    translation = (ps - pt).mean(axis=0)
    center = pt.mean(axis=0)
    return PartTransform(
        scale=float(len_s / len_t),
        translation=(float(translation[0]), float(translation[1])),
        center=(float(center[0]), float(center[1])),
    )


def apply_transform_points(points: np.ndarray, transform: PartTransform) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    c = np.asarray(transform.center)
    return transform.scale * (pts - c) + c + np.asarray(transform.translation)


def transform_pose(pose: Pose, transform: PartTransform, indices=None) -> Pose:
    """Apply ``transform`` to the visible points in ``indices`` (all by default)."""
    xy = pose.xy.copy()
    sel = np.zeros(len(xy), dtype=bool)
    sel[list(range(len(xy))) if indices is None else list(indices)] = True
    sel &= pose.visible
    xy[sel] = apply_transform_points(xy[sel], transform)
    return pose.replace_xy(xy)


def apply_transform_raster(raster: np.ndarray, transform: PartTransform, mode: str = "nearest") -> np.ndarray:
    """Warp an ``H x W`` or ``H x W x C`` raster by inverse mapping.

    ``mode="nearest"`` keeps labels intact (use it for layouts); ``"bilinear"``
    is for colour. Samples that land outside the source extent are zero.
    """
    if raster.ndim not in (2, 3):
        raise ShapeMismatch(f"expected a 2-D or 3-D raster, got shape {raster.shape}")
    if transform.is_identity:
        return raster.copy()
    h, w = raster.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = transform.center
    tx, ty = transform.translation
    src_x = (xs - cx - tx) / transform.scale + cx
    src_y = (ys - cy - ty) / transform.scale + cy
    squeeze = raster.ndim == 2
    data = raster[..., None] if squeeze else raster

    if mode == "nearest":
        ix = np.floor(src_x + 0.5).astype(np.int64)
        iy = np.floor(src_y + 0.5).astype(np.int64)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out = np.zeros_like(data)
        out[inside] = data[iy[inside], ix[inside]]
    elif mode == "bilinear":
        x0 = np.floor(src_x).astype(np.int64)
        y0 = np.floor(src_y).astype(np.int64)
        fx = (src_x - x0)[..., None]
        fy = (src_y - y0)[..., None]
        vals = data.astype(np.float64)
        out = np.zeros(data.shape, dtype=np.float64)
        for dy, dx, wgt in (
            (0, 0, (1 - fy) * (1 - fx)),
            (0, 1, (1 - fy) * fx),
            (1, 0, fy * (1 - fx)),
            (1, 1, fy * fx),
        ):
            yy, xx = y0 + dy, x0 + dx
            ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            sample = np.zeros(data.shape, dtype=np.float64)
            sample[ok] = vals[yy[ok], xx[ok]]
            out += wgt * sample
        if np.issubdtype(data.dtype, np.integer):
            out = np.clip(np.floor(out + 0.5), np.iinfo(data.dtype).min, np.iinfo(data.dtype).max)
        out = out.astype(data.dtype if np.issubdtype(data.dtype, np.integer) else np.float64)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    return out[..., 0] if squeeze else out


def scale_pose_about(pose: Pose, factor: float, center) -> Pose:
    """Uniformly scale every visible point about ``center``."""
    c = np.asarray(center, dtype=np.float64)
    xy = pose.xy.copy()
    xy[pose.visible] = factor * (xy[pose.visible] - c) + c
    return pose.replace_xy(xy)
