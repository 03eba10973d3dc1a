"""Synthetic laryngoscopy-style images with masks, plus manifest I/O.

Appearance model (normal / benign / malignant):

* normal: pinkish mucosa texture with vignetting, no lesion, all-zero mask
* benign: one smooth, bright, nearly round ellipse with a soft rim
* malignant: one irregular dark-red blob with bright speckle inside
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .config import CLASS_NAMES

SPLITS = ("train", "val", "test")
MASK_THRESHOLD = 128


class DataError(RuntimeError):
    """Unreadable, corrupt or inconsistent dataset files."""


@dataclass
class ImageSample:
    image_id: str
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]
    label: int
    mask: np.ndarray | None = None  # H x W uint8 in {0, 255}
    split: str = "train"


@dataclass
class ManifestEntry:
    image_path: str
    label: int
    mask_path: str = ""
    split: str = "train"

    @property
    def image_id(self) -> str:
        return Path(self.image_path).stem


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)
    class_names: tuple[str, ...] = CLASS_NAMES
    image_size: int | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def validate(self, check_files: bool = True) -> None:
        train_labels = {e.label for e in self.split("train")}
        if train_labels != {0, 1, 2}:
            raise DataError(f"train split must contain all 3 labels, found {sorted(train_labels)}")
        if check_files:
            for e in self.entries:
                for rel in (e.image_path, e.mask_path):
                    if rel and not os.access(self.resolve(rel), os.R_OK):
                        raise DataError(f"unreadable file: {self.resolve(rel)}")

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            for e in self.entries:
                rec = {"image_path": e.image_path, "mask_path": e.mask_path, "label": e.label, "split": e.split}
                fh.write(json.dumps(rec) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        entries = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    entry = ManifestEntry(
                        image_path=rec["image_path"],
                        label=int(rec["label"]),
                        mask_path=rec.get("mask_path") or "",
                        split=rec.get("split", "train"),
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from None
                if entry.label not in (0, 1, 2):
                    raise DataError(f"{path}:{lineno}: label {entry.label} not in 0/1/2")
                if entry.split not in SPLITS:
                    raise DataError(f"{path}:{lineno}: split {entry.split!r} not in {SPLITS}")
                entries.append(entry)
        manifest = cls(entries=entries, root=path.parent)
        if entries:
            with Image.open(manifest.resolve(entries[0].image_path)) as im:
                manifest.image_size = im.size[0]
        return manifest


# --------------------------------------------------------------------------- generator


def _mucosa(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r2 = ((xx - size / 2) ** 2 + (yy - size / 2) ** 2) / (size / 2) ** 2
    vignette = np.clip(1.0 - 0.35 * r2, 0.35, 1.0)
    base = np.array([0.80, 0.47, 0.43]) + rng.normal(0.0, 0.025, 3)
    coarse = gaussian_filter(rng.normal(size=(size, size)), sigma=size / 12)
    coarse /= np.abs(coarse).max() + 1e-12
    fine = gaussian_filter(rng.normal(size=(size, size)), sigma=1.0)
    img = base[None, None, :] * vignette[..., None]
    img = img + 0.06 * coarse[..., None] * np.array([1.0, 0.6, 0.6]) + 0.03 * fine[..., None]
    return img


def _lesion_frame(rng: np.random.Generator, size: int):
    cx, cy = rng.uniform(0.3, 0.7, 2) * size
    r0 = rng.uniform(0.13, 0.22) * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return xx - cx, yy - cy, r0


def _benign(rng: np.random.Generator, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    size = img.shape[0]
    dx, dy, a = _lesion_frame(rng, size)
    b = a * rng.uniform(0.78, 1.0)
    th = rng.uniform(0, np.pi)
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    d = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    mask = d <= 1.0
    weight = np.clip((1.0 - d) / 0.25, 0.0, 1.0) ** 0.7
    color = np.array([0.97, 0.88, 0.80]) + rng.normal(0.0, 0.02, 3)
    shade = 1.0 - 0.12 * d ** 2
    lesion = color[None, None, :] * shade[..., None]
    img = img * (1 - weight[..., None]) + lesion * weight[..., None]
    return img, mask


def _malignant(rng: np.random.Generator, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    size = img.shape[0]
    dx, dy, r0 = _lesion_frame(rng, size)
    theta = np.arctan2(dy, dx)
    radius = np.ones_like(theta)
    for k in range(2, 7):
        radius += rng.uniform(0.05, 0.16) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    radius *= r0
    dist = np.hypot(dx, dy)
    mask = dist <= radius
    color = np.array([0.42, 0.08, 0.10]) + rng.normal(0.0, 0.02, 3)
    speckle = (rng.random(img.shape[:2]) < 0.18).astype(np.float64)
    speckle = gaussian_filter(speckle, 0.6) * 2.2
    lesion = color[None, None, :] + speckle[..., None] * np.array([0.55, 0.5, 0.35])
    lesion = lesion + 0.05 * rng.normal(size=img.shape)
    img = np.where(mask[..., None], lesion, img)
    return img, mask


_PAINTERS = {1: _benign, 2: _malignant}


def render_sample(label: int, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (uint8 H x W x 3 image, uint8 {0,255} mask) for one class-conditioned draw."""
    img = _mucosa(rng, size)
    mask = np.zeros((size, size), dtype=bool)
    if label in _PAINTERS:
        img, mask = _PAINTERS[label](rng, img)
        if not mask.any():
            # degenerate draw; the lesion center is always inside the frame
            c = size // 2
            mask[c, c] = True
    pixels = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return pixels, mask.astype(np.uint8) * 255


def generate_synthetic(num_per_class: int, image_size: int, seed: int, out_dir: str | Path,
                       test_per_class: int = 0, val_per_class: int = 0) -> DatasetManifest:
    """Write images/, masks/ and manifest.jsonl under ``out_dir``.

    Every sample draws from its own generator keyed by (seed, split, class, index),
    so the output does not depend on iteration order. ``test_per_class`` and
    ``val_per_class`` add pre-marked held-out entries.
    """
    if image_size % 32:
        raise ValueError(f"image_size {image_size} must be divisible by 32")
    if num_per_class < 1:
        raise ValueError("num_per_class must be >= 1")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory {out} is not writable")

    entries = []
    for split_code, (split, count) in enumerate((("train", num_per_class), ("test", test_per_class),
                                                     ("val", val_per_class))):
        for label, cname in enumerate(CLASS_NAMES):
            for i in range(count):
                rng = np.random.default_rng([seed, split_code, label, i])
                pixels, mask = render_sample(label, image_size, rng)
                stem = f"{cname}_{split}_{i:04d}"
                img_rel, mask_rel = f"images/{stem}.png", f"masks/{stem}.png"
                try:
                    Image.fromarray(pixels, "RGB").save(out / img_rel)
                    Image.fromarray(mask, "L").save(out / mask_rel)
                except OSError as exc:
                    raise DataError(f"cannot write under {out}: {exc}") from None
                entries.append(ManifestEntry(img_rel, label, mask_rel, split))
    manifest = DatasetManifest(entries=entries, root=out, image_size=image_size)
    manifest.write(out / "manifest.jsonl")
    return manifest


def split_manifest(manifest: DatasetManifest, val_fraction: float, seed: int) -> DatasetManifest:
    """Stratified per-class train/val reassignment; pre-marked test entries stay put."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    new_split = {i: e.split for i, e in enumerate(manifest.entries)}
    for label in range(len(manifest.class_names)):
        cand = [i for i, e in enumerate(manifest.entries) if e.label == label and e.split != "test"]
        if not cand:
            continue
        if len(cand) < 2:
            raise DataError(f"class {label} has {len(cand)} train candidate(s); need at least 2")
        order = rng.permutation(len(cand))
        n_val = int(np.floor(val_fraction * len(cand) + 0.5))
        n_val = min(max(n_val, 1), len(cand) - 1)
        for rank, j in enumerate(order):
            new_split[cand[j]] = "val" if rank < n_val else "train"
    entries = [ManifestEntry(e.image_path, e.label, e.mask_path, new_split[i])
               for i, e in enumerate(manifest.entries)]
    return DatasetManifest(entries=entries, root=manifest.root, class_names=manifest.class_names,
                           image_size=manifest.image_size)


# --------------------------------------------------------------------------- loading


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"corrupt or unreadable image {path}: {exc}") from None
    return arr / 255.0


def read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"corrupt or unreadable mask {path}: {exc}") from None
    return np.where(arr >= MASK_THRESHOLD, 255, 0).astype(np.uint8)


def load_batch(manifest: DatasetManifest, split: str, indices: Sequence[int],
               augment: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
               seed: int = 0) -> list[ImageSample]:
    """Decode ``indices`` of ``split``. ``augment`` only ever touches train-split pixels."""
    entries = manifest.split(split)
    out = []
    for idx in indices:
        if not 0 <= idx < len(entries):
            raise IndexError(f"index {idx} outside split {split!r} of size {len(entries)}")
        e = entries[idx]
        pixels = read_image(manifest.resolve(e.image_path))
        mask = None
        if e.mask_path:
            mask = read_mask(manifest.resolve(e.mask_path))
            if mask.shape != pixels.shape[:2]:
                raise DataError(f"mask/image size mismatch for {e.image_id}: {mask.shape} vs {pixels.shape[:2]}")
        if augment is not None and split == "train":
            pixels = augment(pixels, np.random.default_rng([seed, idx]))
        out.append(ImageSample(e.image_id, pixels, e.label, mask, e.split))
    return out


# --------------------------------------------------------------------------- augmentation


def _gray(img):
    return img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)


def _brightness(img, m):
    return img * (1.0 + m)


def _contrast(img, m):
    mean = _gray(img).mean()
    return (img - mean) * (1.0 + m) + mean


def _color(img, m):
    g = _gray(img)[..., None]
    return (img - g) * (1.0 + m) + g


def _gamma(img, m):
    return np.clip(img, 0, 1) ** (1.0 + m)


def _sharpness(img, m):
    blur = gaussian_filter(img, sigma=(1.0, 1.0, 0.0))
    return img + m * (img - blur)


def _posterize(img, m):
    bits = max(2, int(round(8 - 4 * abs(m))))
    levels = 2 ** bits - 1
    return np.round(np.clip(img, 0, 1) * levels) / levels


def _autocontrast(img, m):
    lo = img.min(axis=(0, 1), keepdims=True)
    hi = img.max(axis=(0, 1), keepdims=True)
    return (img - lo) / np.maximum(hi - lo, 1e-6)


PHOTOMETRIC_OPS = {
    "identity": lambda img, m: img,
    "brightness": _brightness,
    "contrast": _contrast,
    "color": _color,
    "gamma": _gamma,
    "sharpness": _sharpness,
    "posterize": _posterize,
    "autocontrast": _autocontrast,
}


class RandAugment:
    """Photometric-only RandAugment: ``n`` random ops at magnitude ``m`` (0..10).

    Geometric ops are excluded so oracle masks stay aligned with the pixels.
    """

    def __init__(self, n: int = 2, m: float = 5.0):
        self.n = n
        self.m = m
        self.names = sorted(PHOTOMETRIC_OPS)

    def __call__(self, pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        img = pixels.astype(np.float32, copy=True)
        scale = 0.5 * self.m / 10.0
        for _ in range(self.n):
            name = self.names[rng.integers(len(self.names))]
            mag = scale * (1.0 if rng.random() < 0.5 else -1.0)
            img = PHOTOMETRIC_OPS[name](img, mag)
        return np.clip(img, 0.0, 1.0).astype(np.float32)
