"""Spatial decomposition: masks, bounding boxes, dilation, foreground/background split
and the random-block masking used for self-supervised pretraining."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import InvalidRangeError, ShapeMismatchError

logger = logging.getLogger(__name__)

GRAY = 127.5
MODES = ("pretrain", "finetune")


def coverage(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask)) / mask.size


def bbox_mask(mask: np.ndarray) -> np.ndarray:
    out = np.zeros(mask.shape, dtype=np.uint8)
    ys, xs = np.nonzero(mask)
    if ys.size:
        out[ys.min():ys.max() + 1, xs.min():xs.max() + 1] = 1
    return out


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilation with a (2r+1) x (2r+1) square structuring element."""
    if radius < 0:
        raise InvalidRangeError(f"radius must be >= 0, got {radius}")
    m = np.asarray(mask, dtype=np.uint8)
    if radius == 0:
        return m.copy()
    return ndimage.maximum_filter(m, size=2 * radius + 1, mode="constant", cval=0).astype(np.uint8)


@dataclass
class Decomposition:
    """Condition bundle: foreground, background, mask and (optionally) flow.

    Images are float32 on the 0-255 scale with removed pixels set to ``GRAY``.
    ``fg_keep``/``bg_keep`` record which source pixels each image retains.
    """
    foreground: np.ndarray
    background: np.ndarray
    mask: np.ndarray
    mode: str
    fg_keep: np.ndarray
    bg_keep: np.ndarray
    flow: Optional[np.ndarray] = None


def split_frame(image: np.ndarray, mask: np.ndarray, mode: str = "finetune",
                dilation_radius: int = 2) -> Decomposition:
    """F = I*M; B = I*(1 - BBox(M)) in finetune mode or I*(1 - Dilate(M)) in pretrain mode."""
    if mode not in MODES:
        raise InvalidRangeError(f"mode must be one of {MODES}, got {mode!r}")
    if image.shape[:2] != mask.shape:
        raise ShapeMismatchError(f"image {image.shape[:2]} and mask {mask.shape} differ")
    m = (np.asarray(mask) != 0).astype(np.uint8)
    hole = bbox_mask(m) if mode == "finetune" else dilate(m, dilation_radius)
    bg_keep = (1 - hole).astype(np.uint8)
    img = np.asarray(image, dtype=np.float32)
    sel = (lambda k: k[..., None]) if img.ndim == 3 else (lambda k: k)
    fg = np.where(sel(m) == 1, img, np.float32(GRAY)).astype(np.float32)
    bg = np.where(sel(bg_keep) == 1, img, np.float32(GRAY)).astype(np.float32)
    return Decomposition(fg, bg, m, mode, m.copy(), bg_keep)


@dataclass
class BlockMask:
    foreground: np.ndarray
    background: np.ndarray
    mask: np.ndarray
    covered: int
    iterations: int
    cap_hit: bool
    blocks: list[tuple[int, int, int]]  # (y, x, size)


def default_block_sizes(h: int, w: int) -> tuple[int, int]:
    side = min(h, w)
    return max(1, side // 8), max(1, side // 4)


def random_block_mask(image: np.ndarray, coverage: float = 0.5, min_block: Optional[int] = None,
                      max_block: Optional[int] = None, boundary_margin: int = 1, max_iter: int = 500,
                      rng: Optional[np.random.Generator] = None) -> BlockMask:
    """Draw disjoint random square blocks until they cover ``coverage`` of the frame.

    Overlapping candidates are rejected. The foreground keeps source content in
    each block shrunk by ``boundary_margin`` at its far edges on a gray canvas;
    the background grays out each block grown by the same margin.
    """
    if image is None:
        raise InvalidRangeError("input image is empty")
    h, w = image.shape[:2]
    dmin, dmax = default_block_sizes(h, w)
    min_block = dmin if min_block is None else int(min_block)
    max_block = dmax if max_block is None else int(max_block)
    if not 0.0 <= coverage <= 1.0:
        raise InvalidRangeError(f"coverage must be in [0, 1], got {coverage}")
    if not 0 < min_block <= max_block <= min(h, w):
        raise InvalidRangeError(f"need 0 < min_block <= max_block <= {min(h, w)}, got {min_block}, {max_block}")
    if boundary_margin < 0:
        raise InvalidRangeError("boundary_margin must be >= 0")
    rng = np.random.default_rng() if rng is None else rng

    src = np.asarray(image, dtype=np.float32)
    background = src.copy()
    foreground = np.full_like(src, GRAY)
    mask = np.zeros((h, w), dtype=np.uint8)
    target = h * w * coverage
    covered = 0
    budget = max_iter
    blocks = []
    while covered < target and budget > 0:
        budget -= 1
        size = int(rng.integers(min_block, max_block + 1))
        x = int(rng.integers(0, w - size + 1))
        y = int(rng.integers(0, h - size + 1))
        if mask[y:y + size, x:x + size].any():
            continue
        inner = size - boundary_margin
        if inner > 0:
            foreground[y:y + inner, x:x + inner] = src[y:y + inner, x:x + inner]
        outer = size + boundary_margin
        background[y:y + outer, x:x + outer] = GRAY
        mask[y:y + size, x:x + size] = 1
        covered += size * size
        blocks.append((y, x, size))
        if covered > 1.1 * target:
            break
    iterations = max_iter - budget
    cap_hit = covered < target
    if cap_hit:
        logger.info("block mask stopped at iteration cap: coverage %.3f < %.3f", covered / (h * w), coverage)
    return BlockMask(foreground, background, mask, covered, iterations, cap_hit, blocks)
