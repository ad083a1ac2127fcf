"""Dataset loading, splitting, preprocessing, and augmentation.

Expected directory layout: one subdirectory per severity grade name
(NoDR, Mild, Moderate, Severe, Proliferative) containing png/jpg/bmp
files. Loading is deterministic: files are ordered lexicographically by
path, and undecodable files are skipped with a warning rather than
aborting the run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .graph import DRLabel
from .tensor import Tensor, round_half_away

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
TARGET_SIZE = 224


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (h, w, 3) uint8 RGB
    label: DRLabel
    source_id: str

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ValueError(f"pixels must be (h, w, 3) uint8, got {p.shape} {p.dtype}")


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    validation: list
    seed: int


def load_dataset(root_dir) -> list:
    """Decode every image under the class-per-directory layout.

    Returns images ordered lexicographically by path. Unknown
    subdirectories are rejected; files that fail to decode are skipped,
    warned about, and counted. Per-class counts are logged, including a
    note when the class distribution is imbalanced.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    known = {label.name for label in DRLabel}
    for entry in sorted(root.iterdir()):
        if entry.is_dir() and entry.name not in known:
            raise ValueError(
                f"unknown class directory {entry.name!r}; expected one of {sorted(known)}"
            )

    paths = []
    for label in DRLabel:
        class_dir = root / label.name
        if not class_dir.is_dir():
            continue
        for p in class_dir.iterdir():
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS:
                paths.append((p, label))
    paths.sort(key=lambda pl: str(pl[0]))

    images = []
    skipped = 0
    for path, label in paths:
        try:
            with Image.open(path) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except Exception as e:
            skipped += 1
            log.warning("skipping undecodable image %s: %s", path, e)
            continue
        images.append(LabeledImage(pixels, label, str(path)))

    counts = {label.name: 0 for label in DRLabel}
    for img in images:
        counts[img.label.name] += 1
    log.info("loaded %d images (%d skipped): %s", len(images), skipped, counts)
    nonzero = [c for c in counts.values() if c > 0]
    if nonzero and max(nonzero) > 2 * min(nonzero):
        log.info("class distribution is imbalanced: %s", counts)
    return images


def split(dataset: list, seed: int, stratified: bool = False) -> DatasetSplit:
    """Seeded shuffle then an 80/20 cut; same seed, same split.

    The default cut is per-image uniform with |train| = floor(0.8 N).
    Stratified mode cuts each class at floor(0.8 Nc) instead, which can
    shift the overall train size by a few images.
    """
    n = len(dataset)
    if n < 5:
        raise ValueError(f"need at least 5 images to split, got {n}")
    rng = np.random.default_rng(seed)
    if not stratified:
        order = rng.permutation(n)
        cut = n * 4 // 5  # floor(0.8 n) in exact integer arithmetic
        train = [dataset[i] for i in order[:cut]]
        val = [dataset[i] for i in order[cut:]]
        return DatasetSplit(train, val, seed)
    train, val = [], []
    for label in DRLabel:
        members = [img for img in dataset if img.label == label]
        order = rng.permutation(len(members))
        cut = len(members) * 4 // 5
        train.extend(members[i] for i in order[:cut])
        val.extend(members[i] for i in order[cut:])
    return DatasetSplit(train, val, seed)


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resample (half-pixel centers, edges clamped), float64 out."""
    h, w = pixels.shape[:2]
    src = pixels.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = src[y0c][:, x0c] * (1 - wx) + src[y0c][:, x1c] * wx
    bot = src[y1c][:, x0c] * (1 - wx) + src[y1c][:, x1c] * wx
    return top * (1 - wy) + bot * wy


def preprocess(image: LabeledImage) -> Tensor:
    """Resize to the 224x224 network input and scale channels to [0, 1]."""
    h, w = image.pixels.shape[:2]
    if h < 2 or w < 2:
        raise ValueError(f"image {image.source_id!r} is degenerate at {h}x{w}")
    resized = resize_bilinear(image.pixels, TARGET_SIZE, TARGET_SIZE)
    arr = (resized / 255.0).astype(np.float32)[None, ...]
    return Tensor((1, TARGET_SIZE, TARGET_SIZE, 3), "f32", arr)


@dataclass(frozen=True)
class AugmentSpec:
    flip_h: bool = False
    flip_v: bool = False
    rot90_k: int = 0
    contrast_factor: float = 1.0


def augment(image: LabeledImage, spec: AugmentSpec) -> LabeledImage:
    """Exact geometric transforms plus contrast about the per-image gray mean.

    Flips and quarter-turn rotations are pixel permutations, so they never
    resample. Contrast maps p -> clamp(mean + factor * (p - mean), 0, 255)
    with mean taken over all channels. The label is preserved.
    """
    if spec.rot90_k not in (0, 1, 2, 3):
        raise ValueError(f"rot90_k must be in 0..3, got {spec.rot90_k}")
    if not 0.5 <= spec.contrast_factor <= 1.5:
        raise ValueError(f"contrast_factor must be in [0.5, 1.5], got {spec.contrast_factor}")
    px = image.pixels
    if spec.flip_h:
        px = px[:, ::-1]
    if spec.flip_v:
        px = px[::-1]
    if spec.rot90_k:
        px = np.rot90(px, k=spec.rot90_k, axes=(0, 1))
    if spec.contrast_factor != 1.0:
        mean = px.astype(np.float64).mean()
        adjusted = mean + spec.contrast_factor * (px.astype(np.float64) - mean)
        px = round_half_away(np.clip(adjusted, 0, 255)).astype(np.uint8)
    return LabeledImage(np.ascontiguousarray(px), image.label, image.source_id)
