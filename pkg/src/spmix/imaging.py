"""Image loading, saving, bilinear resizing and augmentation views.

Images are float64 arrays of shape (H, W, C) with values in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageFormatError(ValueError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected an HxWxC image with C in (1, 3), got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return img


@lru_cache(maxsize=64)
def _bilinear_taps(n_out: int, n_in: int):
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0, n_in - 1)
    lo = np.floor(x).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, x - lo


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and clamped edges, no antialiasing.

    Works on (H, W) or (H, W, C). Interpolation is written as
    ``a + (b - a) * t`` so constant inputs come back bit-identical.
    """
    src = np.asarray(img)
    if src.dtype.kind != "f":
        src = src.astype(np.float64)
    h, w = src.shape[:2]
    if (h, w) == (height, width):
        return src.copy()
    y0, y1, ty = _bilinear_taps(height, h)
    x0, x1, tx = _bilinear_taps(width, w)
    extra = (1,) * (src.ndim - 2)
    a = src[y0]
    rows = a + (src[y1] - a) * ty.reshape((-1, 1) + extra).astype(src.dtype)
    a = rows[:, x0]
    return a + (rows[:, x1] - a) * tx.reshape((1, -1) + extra).astype(src.dtype)


def to_gray(img: np.ndarray) -> np.ndarray:
    """Channel mean (R + G + B) / 3 of an (..., H, W, C) image; 2-d input passes through."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.float64)
    if img.shape[-1] == 1:
        return img[..., 0].astype(np.float64)
    img = img.astype(np.float64)
    return (img[..., 0] + img[..., 1] + img[..., 2]) / 3.0


def load_image(path, size: int | None = 224, channels: int | None = 3) -> np.ndarray:
    """Decode a PNG/JPEG into a float image, resized to ``size`` x ``size``.

    ``channels=3`` duplicates a grayscale plane; ``channels=None`` keeps the
    decoded channel count (1 or 3).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise ImageFormatError(f"{path}: unsupported format {im.format}")
            if im.mode in ("L", "I;16", "I", "1", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except UnidentifiedImageError:
        raise ImageFormatError(f"{path}: cannot decode image") from None
    except OSError as exc:
        raise OSError(f"{path}: {exc}") from None
    img = arr / 255.0
    if channels == 3 and img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    elif channels == 1 and img.shape[2] == 3:
        img = to_gray(img)[:, :, None]
    if size is not None:
        img = resize_bilinear(img, size, size)
    return np.clip(img, 0.0, 1.0)


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    q = quantize(img)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[:, :, 0]
    try:
        Image.fromarray(q).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from None


def save_saliency(smap: np.ndarray, path) -> None:
    """Write a [0, 1] map as an 8-bit grayscale PNG."""
    smap = np.asarray(smap)
    if smap.ndim != 2:
        raise ValueError(f"saliency map must be 2-d, got shape {smap.shape}")
    save_image(smap, path)


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale: tuple[float, float] = (0.6, 1.0)
    flip_prob: float = 0.5
    jitter: float = 0.2

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop scale range must satisfy 0 < min <= max <= 1, got {self.crop_scale}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip probability must be in [0, 1]")
        if self.jitter < 0:
            raise ValueError("jitter amplitude must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(crop_scale=(1.0, 1.0), flip_prob=0.0, jitter=0.0)


def augment_view(img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random resized square crop, horizontal flip, brightness/contrast jitter.

    Every random draw is taken from ``rng`` in a fixed order, even when a
    component is disabled, so the stream position does not depend on the
    policy.
    """
    h, w = img.shape[:2]
    scale = rng.uniform(*policy.crop_scale)
    u_top, u_left = rng.random(2)
    flip = rng.random() < policy.flip_prob
    b, c = rng.uniform(-1.0, 1.0, size=2) * policy.jitter

    out = img
    side_h = max(1, int(round(h * np.sqrt(scale))))
    side_w = max(1, int(round(w * np.sqrt(scale))))
    if (side_h, side_w) != (h, w):
        top = int(u_top * (h - side_h + 1))
        left = int(u_left * (w - side_w + 1))
        out = resize_bilinear(out[top:top + side_h, left:left + side_w], h, w)
    if flip:
        out = out[:, ::-1]
    if policy.jitter > 0:
        m = out.mean()
        out = (out - m) * (1.0 + c) + m + b
    return np.clip(out, 0.0, 1.0)
