"""Center-surround saliency and the lesion-aware per-patch mixup ratio.

Ratio pipeline for one (tail, head) pair::

    raw_t, raw_h = static_saliency(x_t), static_saliency(x_h)
    merged       = max(raw_t, raw_h)
    noisy        = merged + U[0, noise]
    s            = minmax_normalize(noisy)
    r            = patch-average(min(alpha, s))        # clip_first
"""
from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from .imaging import resize_bilinear, to_gray

DEFAULT_WINDOWS = (9, 25, 49)
RATIO_ORDERS = ("clip_first", "average_first")


@lru_cache(maxsize=64)
def _box_bounds(n: int, half: int):
    idx = np.arange(n)
    lo = np.clip(idx - half, 0, n)
    hi = np.clip(idx + half + 1, 0, n)
    return lo, hi, hi - lo


def _box_sum(values: np.ndarray, half: int, axis: int) -> tuple[np.ndarray, np.ndarray]:
    n = values.shape[axis]
    shape = list(values.shape)
    shape[axis] = n + 1
    cs = np.zeros(shape)
    np.cumsum(values, axis=axis, out=cs[(slice(None),) * (axis % values.ndim) + (slice(1, None),)])
    lo, hi, count = _box_bounds(n, half)
    return np.take(cs, hi, axis=axis) - np.take(cs, lo, axis=axis), count


def box_mean(gray: np.ndarray, window: int) -> np.ndarray:
    """Mean over the ``window`` x ``window`` box centred on each pixel.

    Operates on the last two axes. The box is clipped to the image and the
    mean is over the pixels it keeps. Integral image factored into one
    running sum per axis.
    """
    half = window // 2
    rows, nr = _box_sum(np.asarray(gray, dtype=np.float64), half, -2)
    total, nc = _box_sum(rows, half, -1)
    return total / np.outer(nr, nc)


def _check_windows(windows: Sequence[int], h: int, w: int) -> None:
    if not windows:
        raise ValueError("at least one window size is required")
    for k in windows:
        if k < 3 or k % 2 == 0:
            raise ValueError(f"window size must be an odd integer >= 3, got {k}")
        if k > min(h, w):
            raise ValueError(f"window size {k} exceeds image side {min(h, w)}")


def gray_saliency(gray: np.ndarray, windows: Sequence[int] = DEFAULT_WINDOWS) -> np.ndarray:
    """Raw saliency of grayscale planes shaped (..., H, W)."""
    gray = np.asarray(gray, dtype=np.float64)
    _check_windows(windows, *gray.shape[-2:])
    # the difference is shift-invariant; centring on one pixel makes flat regions exactly zero
    gray = gray - gray[..., :1, :1]
    out = np.zeros_like(gray)
    for k in windows:
        out += np.abs(gray - box_mean(gray, k))
    return out


def static_saliency(img: np.ndarray, windows: Sequence[int] = DEFAULT_WINDOWS) -> np.ndarray:
    """Raw saliency of one (H, W, C) image: sum over windows of |gray - box mean|."""
    return gray_saliency(to_gray(np.asarray(img, dtype=np.float64)), windows)


def merge_saliency(s_t: np.ndarray, s_h: np.ndarray) -> np.ndarray:
    if s_t.shape != s_h.shape:
        raise ValueError(f"saliency maps differ in shape: {s_t.shape} vs {s_h.shape}")
    return np.maximum(s_t, s_h)


def add_noise(smap: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    if amplitude < 0:
        raise ValueError(f"noise amplitude must be >= 0, got {amplitude}")
    if amplitude == 0:
        return np.array(smap, dtype=np.float64, copy=True)
    return np.maximum(smap + rng.uniform(0.0, amplitude, size=np.shape(smap)), 0.0)


def minmax_normalize(smap: np.ndarray) -> np.ndarray:
    """Affine map onto [0, 1] over the last two axes; constant maps become 0.5."""
    smap = np.asarray(smap, dtype=np.float64)
    lo = smap.min(axis=(-2, -1), keepdims=True) if smap.ndim >= 2 else smap.min(keepdims=True)
    hi = smap.max(axis=(-2, -1), keepdims=True) if smap.ndim >= 2 else smap.max(keepdims=True)
    span = hi - lo
    flat = span == 0
    out = (smap - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, out)


def lesion_ratio(s_t: np.ndarray, s_h: np.ndarray, alpha: float) -> np.ndarray:
    """Pixel-level ratio ``min(alpha, max(s_h, s_t))`` on normalized scores."""
    return np.minimum(alpha, np.maximum(s_h, s_t))


def _fit_to_grid(smap: np.ndarray, grid: int) -> np.ndarray:
    h, w = smap.shape[-2:]
    if h % grid == 0 and w % grid == 0:
        return smap
    nh = grid * -(-h // grid)
    nw = grid * -(-w // grid)
    moved = np.moveaxis(smap, (-2, -1), (0, 1))
    return np.moveaxis(resize_bilinear(moved, nh, nw), (0, 1), (-2, -1))


def patch_mean(values: np.ndarray, grid: int) -> np.ndarray:
    """Average over a grid x grid tiling of the last two axes."""
    values = _fit_to_grid(values, grid)
    h, w = values.shape[-2:]
    lead = values.shape[:-2]
    blocks = values.reshape(lead + (grid, h // grid, grid, w // grid))
    # a mean lies within its block's range; clamping keeps flat blocks exact
    return np.clip(blocks.mean(axis=(-3, -1)), blocks.min(axis=(-3, -1)), blocks.max(axis=(-3, -1)))


def patch_ratios(normalized: np.ndarray, grid: int, alpha: float,
                 order: str = "clip_first") -> np.ndarray:
    """G x G mixup ratios from a normalized merged saliency map."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if grid < 1:
        raise ValueError(f"grid side must be positive, got {grid}")
    if order == "clip_first":
        return patch_mean(np.minimum(normalized, alpha), grid)
    if order == "average_first":
        return np.minimum(patch_mean(normalized, grid), alpha)
    raise ValueError(f"unknown ratio order {order!r}; expected one of {RATIO_ORDERS}")


def pair_ratios(x_t: np.ndarray, x_h: np.ndarray, grid: int, alpha: float,
                noise: float, rng: np.random.Generator,
                windows: Sequence[int] = DEFAULT_WINDOWS,
                order: str = "clip_first") -> np.ndarray:
    """Full ratio pipeline for a tail image and its head partner.

    Accepts single (H, W, C) images or stacks (M, H, W, C); returns (G, G)
    or (M, G, G) ratio grids.
    """
    x_t, x_h = np.asarray(x_t), np.asarray(x_h)
    if x_t.shape != x_h.shape:
        raise ValueError(f"image shapes differ: {x_t.shape} vs {x_h.shape}")
    merged = merge_saliency(gray_saliency(to_gray(x_t), windows), gray_saliency(to_gray(x_h), windows))
    s = minmax_normalize(add_noise(merged, noise, rng))
    return patch_ratios(s, grid, alpha, order)
