"""Mask-driven lesion localization: mask -> extremal-point box -> crop -> upsample.

Coordinates follow ``x = column``, ``y = row``; boxes are inclusive on both ends.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .synthdata import DataError, ImageSample, read_mask

Point = tuple[int, int]


@dataclass(frozen=True)
class SegmenterKind:
    kind: str = "oracle"  # oracle | precomputed | center
    mask_dir: str | None = None

    def __post_init__(self):
        if self.kind == "center_fallback_only":
            object.__setattr__(self, "kind", "center")
        if self.kind not in ("oracle", "precomputed", "center"):
            raise ValueError(f"unknown segmenter kind {self.kind!r}")
        if self.kind == "precomputed" and not self.mask_dir:
            raise ValueError("precomputed segmenter needs mask_dir")


@dataclass
class LesionLocalization:
    mask: np.ndarray
    p1: Point
    p2: Point
    lesion_image: np.ndarray
    used_fallback: bool


def segment(sample: ImageSample, segmenter: SegmenterKind) -> np.ndarray:
    h, w = sample.pixels.shape[:2]
    if segmenter.kind == "center":
        return np.zeros((h, w), dtype=np.uint8)
    if segmenter.kind == "oracle":
        if sample.mask is None:
            raise DataError(f"oracle segmenter needs a ground-truth mask for {sample.image_id}")
        mask = sample.mask
    else:
        path = Path(segmenter.mask_dir) / f"{sample.image_id}.png"
        if not path.exists():
            raise DataError(f"missing precomputed mask {path}")
        mask = read_mask(path)
    if mask.shape != (h, w):
        raise DataError(f"mask size {mask.shape} does not match image {(h, w)} for {sample.image_id}")
    return mask


def extremal_points(mask: np.ndarray) -> tuple[Point, Point] | None:
    fg = mask == 255
    rows = np.flatnonzero(fg.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(fg.any(axis=0))
    return (int(cols[0]), int(rows[0])), (int(cols[-1]), int(rows[-1]))


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centers, no corner alignment; edge samples clamp
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an H x W (x C) array without corner alignment."""
    squeeze = img.ndim == 2
    a = img[..., None] if squeeze else img
    a = a.astype(np.float64)
    r0, r1, fr = _bilinear_axis(a.shape[0], out_h)
    c0, c1, fc = _bilinear_axis(a.shape[1], out_w)
    top = a[r0][:, c0] * (1 - fc)[None, :, None] + a[r0][:, c1] * fc[None, :, None]
    bot = a[r1][:, c0] * (1 - fc)[None, :, None] + a[r1][:, c1] * fc[None, :, None]
    out = top * (1 - fr)[:, None, None] + bot * fr[:, None, None]
    out = out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)
    return out[..., 0] if squeeze else out


def crop_and_upsample(whole: np.ndarray, p1: Point, p2: Point) -> np.ndarray:
    h, w = whole.shape[:2]
    (x0, y0), (x1, y1) = p1, p2
    if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
        raise ValueError(f"box {p1}-{p2} outside image of size {w}x{h} or inverted")
    return resize_bilinear(whole[y0:y1 + 1, x0:x1 + 1], h, w)


def center_box(h: int, w: int, size: int) -> tuple[Point, Point]:
    if size > min(h, w):
        raise ValueError(f"fallback size {size} exceeds image {w}x{h}")
    y0, x0 = (h - size) // 2, (w - size) // 2
    return (x0, y0), (x0 + size - 1, y0 + size - 1)


def localize_mask(pixels: np.ndarray, mask: np.ndarray, fallback_size: int = 128) -> LesionLocalization:
    h, w = pixels.shape[:2]
    if fallback_size > min(h, w):
        raise ValueError(f"fallback size {fallback_size} exceeds image {w}x{h}")
    box = extremal_points(mask)
    used_fallback = box is None
    if used_fallback:
        box = center_box(h, w, fallback_size)
    p1, p2 = box
    return LesionLocalization(mask, p1, p2, crop_and_upsample(pixels, p1, p2), used_fallback)


def localize(sample: ImageSample, segmenter: SegmenterKind, fallback_size: int = 128) -> LesionLocalization:
    return localize_mask(sample.pixels, segment(sample, segmenter), fallback_size)


def mask_iou_dice(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    p, t = pred > 0, truth > 0
    inter = int(np.logical_and(p, t).sum())
    union = int(np.logical_or(p, t).sum())
    total = int(p.sum() + t.sum())
    if total == 0:
        return 1.0, 1.0
    return inter / union, 2.0 * inter / total
