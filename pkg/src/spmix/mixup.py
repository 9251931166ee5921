"""Patch-based convex blending of tail and head samples."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .imaging import AugmentationPolicy, augment_view
from .saliency import DEFAULT_WINDOWS, pair_ratios

# how the per-patch tail weight is produced
RATIO_MODES = ("saliency_patch", "saliency_scalar", "random_patch", "random_scalar")


def mix_features(f_t, f_h, ratios) -> ad.Tensor:
    """token_i = r_i * f_t[i] + (1 - r_i) * f_h[i].

    ``f_t``/``f_h`` are (..., N, D) token maps; ``ratios`` is (..., G, G) or
    (..., N) with N = G * G. The ratio is a constant: gradients reach both
    feature inputs, not the ratios.
    """
    f_t, f_h = ad.as_tensor(f_t), ad.as_tensor(f_h)
    if f_t.shape != f_h.shape:
        raise ad.ShapeError(f"mix_features: feature maps differ, {f_t.shape} vs {f_h.shape}")
    r = np.asarray(ratios, dtype=f_t.data.dtype)
    n = f_t.shape[-2]
    lead = f_t.shape[:-2]
    if r.size == n:
        r = r.reshape(n, 1)
    elif r.size == n * int(np.prod(lead)):
        r = r.reshape(lead + (n, 1))
    else:
        raise ad.ShapeError(f"mix_features: ratio grid {r.shape} does not match features {f_t.shape}")
    return ad.add(ad.mul(f_t, r), ad.mul(f_h, 1.0 - r))


def expand_ratios(ratios: np.ndarray, height: int, width: int) -> np.ndarray:
    g = ratios.shape[0]
    if ratios.shape != (g, g) or height % g or width % g:
        raise ValueError(f"ratio grid {ratios.shape} does not tile a {height}x{width} image")
    return np.kron(ratios, np.ones((height // g, width // g)))


def mix_images(x_t: np.ndarray, x_h: np.ndarray, ratios: np.ndarray) -> np.ndarray:
    """Blend each pixel block with its patch ratio."""
    if x_t.shape != x_h.shape:
        raise ValueError(f"mix_images: image shapes differ, {x_t.shape} vs {x_h.shape}")
    r = expand_ratios(np.asarray(ratios, dtype=np.float64), *x_t.shape[:2])[:, :, None]
    return np.clip(r * x_t + (1.0 - r) * x_h, 0.0, 1.0)


def mixing_ratios(x_t: np.ndarray, x_h: np.ndarray, mode: str, grid: int, alpha: float,
                  noise: float, rng: np.random.Generator,
                  windows: Sequence[int] = DEFAULT_WINDOWS, order: str = "clip_first",
                  beta: float = 1.0) -> np.ndarray:
    """Ratio grid for a view pair, (G, G), or for stacked pairs, (M, G, G)."""
    lead = np.shape(x_t)[:-3]
    if mode == "saliency_patch":
        return pair_ratios(x_t, x_h, grid, alpha, noise, rng, windows, order)
    if mode == "saliency_scalar":
        r = pair_ratios(x_t, x_h, 1, alpha, noise, rng, windows, order)
        return np.broadcast_to(r, lead + (grid, grid)).copy()
    if mode == "random_patch":
        return rng.beta(beta, beta, size=lead + (grid, grid))
    if mode == "random_scalar":
        lam = rng.beta(beta, beta, size=lead + (1, 1))
        return np.broadcast_to(lam, lead + (grid, grid)).copy()
    raise ValueError(f"unknown ratio mode {mode!r}; expected one of {RATIO_MODES}")


@dataclass
class MixedPair:
    x_t1: np.ndarray
    x_h1: np.ndarray
    x_t2: np.ndarray
    x_h2: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    label: int

    def images(self) -> tuple[np.ndarray, np.ndarray]:
        """Image-level realisation of the positive pair."""
        return mix_images(self.x_t1, self.x_h1, self.r1), mix_images(self.x_t2, self.x_h2, self.r2)


def build_mixed_pair(x_t: np.ndarray, x_h: np.ndarray, label: int, policy: AugmentationPolicy,
                     alpha: float, grid: int, noise: float, rng: np.random.Generator,
                     mode: str = "saliency_patch", windows: Sequence[int] = DEFAULT_WINDOWS,
                     order: str = "clip_first", beta: float = 1.0) -> MixedPair:
    """Two augmented views of each operand plus an independent ratio grid per view.

    ``label`` is the tail class and is carried through unchanged.
    """
    x_t1 = augment_view(x_t, policy, rng)
    x_h1 = augment_view(x_h, policy, rng)
    x_t2 = augment_view(x_t, policy, rng)
    x_h2 = augment_view(x_h, policy, rng)
    r1 = mixing_ratios(x_t1, x_h1, mode, grid, alpha, noise, rng, windows, order, beta)
    r2 = mixing_ratios(x_t2, x_h2, mode, grid, alpha, noise, rng, windows, order, beta)
    return MixedPair(x_t1, x_h1, x_t2, x_h2, r1, r2, label)
