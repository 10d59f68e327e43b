"""Content crop and bilinear resize for channel-first images in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_SIDE = 8


@dataclass(frozen=True)
class PreprocessConfig:
    crop_threshold: float = 7.0 / 255.0
    target_size: tuple = (64, 64)

    def __post_init__(self):
        if not 0.0 <= self.crop_threshold < 1.0:
            raise ValueError("crop_threshold must lie in [0, 1)")
        h, w = self.target_size
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValueError(f"target_size must be at least {MIN_SIDE}x{MIN_SIDE}")


def content_bbox(image, threshold=7.0 / 255.0):
    """``(top, bottom, left, right)`` half-open box of pixels brighter than ``threshold``, or None."""
    mask = np.asarray(image).max(axis=0) > threshold
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def crop_to_content(image, threshold=7.0 / 255.0):
    """Crop to the tight bounding box of non-background pixels.

    Falls back to the full image when nothing exceeds the threshold or the box
    would be smaller than 8 pixels on a side.
    """
    box = content_bbox(image, threshold)
    if box is None:
        return image
    top, bottom, left, right = box
    if bottom - top < MIN_SIDE or right - left < MIN_SIDE:
        return image
    return image[:, top:bottom, left:right]


def _axis_weights(n_in, n_out):
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize(image, target):
    """Bilinear resample of a (C, H, W) image to ``target = (H', W')``."""
    th, tw = int(target[0]), int(target[1])
    if th < 2 or tw < 2:
        raise ValueError("resize target must be at least 2x2")
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    if (h, w) == (th, tw):
        return image.copy()
    r0, r1, fr = _axis_weights(h, th)
    c0, c1, fc = _axis_weights(w, tw)
    rows = image[:, r0, :] * (1.0 - fr)[None, :, None] + image[:, r1, :] * fr[None, :, None]
    out = rows[:, :, c0] * (1.0 - fc)[None, None, :] + rows[:, :, c1] * fc[None, None, :]
    return np.clip(out, 0.0, 1.0)


def preprocess(image, config: PreprocessConfig = PreprocessConfig()):
    return resize(crop_to_content(image, config.crop_threshold), config.target_size)
