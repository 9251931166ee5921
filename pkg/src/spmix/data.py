"""Manifests, the long-tailed split protocol, Many/Medium/Few subsets and a
synthetic lesion-on-skin dataset generator."""
from __future__ import annotations

import csv
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imaging import load_image, resize_bilinear, save_image

SUBSETS = ("Many", "Medium", "Few")


class ConfigurationError(ValueError):
    pass


@dataclass
class Manifest:
    """(relative path, class name) records plus the directory they resolve against."""

    records: list[tuple[str, str]]
    root: Path = Path(".")
    classes: list[str] | None = None

    def __post_init__(self):
        self.root = Path(self.root)
        paths = [p for p, _ in self.records]
        if len(set(paths)) != len(paths):
            dup = next(p for p, n in Counter(paths).items() if n > 1)
            raise ValueError(f"duplicate manifest path {dup!r}")
        if self.classes is None:
            self.classes = sorted({c for _, c in self.records})
        unknown = {c for _, c in self.records} - set(self.classes)
        if unknown:
            raise ValueError(f"records use classes outside the class index: {sorted(unknown)}")

    @property
    def class_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.classes)}

    @property
    def labels(self) -> np.ndarray:
        idx = self.class_index
        return np.array([idx[c] for _, c in self.records], dtype=np.int64)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.classes))

    def paths(self) -> list[Path]:
        return [self.root / p for p, _ in self.records]

    def __len__(self):
        return len(self.records)

    def subset(self, indices: Sequence[int]) -> "Manifest":
        return Manifest([self.records[i] for i in indices], self.root, list(self.classes))

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected 'path<TAB>class', got {line!r}")
                records.append((parts[0], parts[1]))
        if not records:
            raise ValueError(f"{path}: manifest is empty")
        return cls(records, path.parent)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rel_root = Path(_relpath(self.root, path.parent))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for p, c in self.records:
                fh.write(f"{(rel_root / p).as_posix()}\t{c}\n")

    def load_images(self, size: int, channels: int = 3) -> np.ndarray:
        return np.stack([load_image(p, size, channels) for p in self.paths()])


def _relpath(target: Path, start: Path) -> str:
    return os.path.relpath(Path(target).resolve(), Path(start).resolve())


# ---------------------------------------------------------------- split

def split_sizes(counts: Sequence[int], ratios=(7, 1, 2)) -> tuple[int, int]:
    """Per-class (n_val, n_test), fixed by the rarest class."""
    total = float(sum(ratios))
    m = int(min(counts))
    n_val = max(1, int(np.floor(ratios[1] / total * m + 1e-9)))
    n_test = max(1, int(np.floor(ratios[2] / total * m + 1e-9)))
    return n_val, n_test


def split_dataset(manifest: Manifest, rng: np.random.Generator,
                  ratios=(7, 1, 2)) -> tuple[Manifest, Manifest, Manifest]:
    """Train/val/test split with equal per-class val and test counts.

    Each class gives ``n_val`` and ``n_test`` samples (set by the rarest
    class); everything else stays in the long-tailed train set.
    """
    counts = manifest.counts()
    n_val, n_test = split_sizes(counts, ratios)
    for name, c in zip(manifest.classes, counts):
        if c < 3 or c < n_val + n_test + 1:
            raise ConfigurationError(f"class {name!r} has {c} samples; need at least "
                                     f"{max(3, n_val + n_test + 1)} for a train/val/test split")
    labels = manifest.labels
    train, val, test = [], [], []
    order = sorted(range(len(manifest)), key=lambda i: manifest.records[i][0])
    for k in range(len(manifest.classes)):
        idx = np.array([i for i in order if labels[i] == k])
        idx = idx[rng.permutation(len(idx))]
        test.extend(idx[:n_test].tolist())
        val.extend(idx[n_test:n_test + n_val].tolist())
        train.extend(idx[n_test + n_val:].tolist())
    return tuple(manifest.subset(sorted(s, key=lambda i: manifest.records[i][0])) for s in (train, val, test))


# ---------------------------------------------------------------- subsets

@dataclass
class SubsetPartition:
    assignment: dict[int, str]
    many_min: int
    few_max: int
    counts: list[int] = field(default_factory=list)

    def classes_in(self, subset: str) -> list[int]:
        return sorted(k for k, s in self.assignment.items() if s == subset)

    @property
    def head_classes(self) -> list[int]:
        return self.classes_in("Many")


def partition_subsets(counts: Sequence[int], many_min: int = 1000, few_max: int = 200) -> SubsetPartition:
    """Many if count >= many_min, Few if count <= few_max, else Medium."""
    if many_min <= few_max:
        raise ConfigurationError(f"many_min ({many_min}) must exceed few_max ({few_max})")
    assign = {}
    for k, c in enumerate(counts):
        assign[k] = "Many" if c >= many_min else "Few" if c <= few_max else "Medium"
    return SubsetPartition(assign, many_min, few_max, [int(c) for c in counts])


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    counts: tuple[int, ...] = (500, 200, 80, 30, 10)
    size: int = 64
    lesion_radius: tuple[float, float] = (0.13, 0.19)   # fraction of image side

    @property
    def n_classes(self) -> int:
        return len(self.counts)


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells))
    return resize_bilinear(coarse, size, size)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Class-agnostic skin-like texture: tinted low-frequency field plus grain."""
    base = np.array([0.80, 0.62, 0.52]) + rng.uniform(-0.08, 0.08, 3)
    field_ = 0.6 * _smooth_noise(rng, size, 4) + 0.4 * _smooth_noise(rng, size, 9)
    shade = 0.18 * (field_ - 0.5)
    grain = rng.normal(0.0, 0.025, (size, size, 1))
    return np.clip(base + shade[:, :, None] + grain, 0.0, 1.0)


_SHAPES = ("disk", "ring", "square", "cross", "bar")


def _lesion_mask(shape: str, size: int, cy: float, cx: float, radius: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    r = np.hypot(u, v)
    if shape == "disk":
        return r <= radius
    if shape == "ring":
        return (r <= radius) & (r >= 0.55 * radius)
    if shape == "square":
        return (np.abs(u) <= 0.85 * radius) & (np.abs(v) <= 0.85 * radius)
    if shape == "cross":
        return ((np.abs(u) <= 0.35 * radius) | (np.abs(v) <= 0.35 * radius)) & (np.maximum(np.abs(u), np.abs(v)) <= radius)
    if shape == "bar":
        return (np.abs(u) <= 1.15 * radius) & (np.abs(v) <= 0.45 * radius)
    raise ValueError(f"unknown lesion shape {shape!r}")


def lesion_style(k: int) -> tuple[str, np.ndarray]:
    """Shape and colour of class ``k``'s lesion."""
    shape = _SHAPES[k % len(_SHAPES)]
    tones = np.array([[0.30, 0.18, 0.14], [0.38, 0.22, 0.22], [0.26, 0.20, 0.24],
                      [0.34, 0.16, 0.12], [0.30, 0.22, 0.18]])
    return shape, tones[k % len(tones)]


def synthesize_image(k: int, rng: np.random.Generator, spec: SyntheticSpec) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """One image of class ``k`` and its lesion bounding box (y0, x0, y1, x1)."""
    size = spec.size
    img = _background(rng, size)
    radius = rng.uniform(*spec.lesion_radius) * size
    margin = 1.2 * radius + 1
    cy, cx = rng.uniform(margin, size - margin, 2)
    angle = rng.uniform(0, np.pi)
    shape, tone = lesion_style(k)
    mask = _lesion_mask(shape, size, cy, cx, radius, angle)
    color = np.clip(tone + rng.uniform(-0.04, 0.04, 3), 0, 1)
    texture = 1.0 + 0.08 * (_smooth_noise(rng, size, 12) - 0.5)
    lesion = np.clip(color * texture[:, :, None], 0, 1)
    img = np.where(mask[:, :, None], lesion, img)
    ys, xs = np.nonzero(mask)
    return img, (int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1)


def class_names(n: int) -> list[str]:
    return [f"c{k}_{lesion_style(k)[0]}" for k in range(n)]


def generate_synthetic_lt(out_dir, spec: SyntheticSpec, seed: int,
                          prefix: str = "") -> Manifest:
    """Write the synthetic long-tailed dataset as PNGs plus ``manifest.tsv``."""
    out_dir = Path(out_dir)
    if any(c <= 0 for c in spec.counts):
        raise ConfigurationError(f"class counts must be positive, got {spec.counts}")
    names = class_names(spec.n_classes)
    records = []
    for k, n in enumerate(spec.counts):
        cdir = out_dir / "images" / names[k]
        cdir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng([seed, k])
        for i in range(n):
            img, _ = synthesize_image(k, rng, spec)
            rel = f"images/{names[k]}/{prefix}{i:05d}.png"
            save_image(img, out_dir / rel)
            records.append((rel, names[k]))
    manifest = Manifest(records, out_dir, names)
    manifest.write(out_dir / f"{prefix}manifest.tsv")
    return manifest


# ---------------------------------------------------------------- CSV import

def manifest_from_label_csv(csv_path, image_dir, image_column: str = "image",
                            extension: str = ".jpg") -> Manifest:
    """One-hot label CSV (ISIC-style: image,MEL,NV,...) to a manifest."""
    csv_path, image_dir = Path(csv_path), Path(image_dir)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or image_column not in reader.fieldnames:
            raise ValueError(f"{csv_path}: missing column {image_column!r}")
        classes = [c for c in reader.fieldnames if c != image_column]
        records = []
        for row in reader:
            hot = [c for c in classes if float(row[c]) >= 0.5]
            if len(hot) != 1:
                raise ValueError(f"{csv_path}: row {row[image_column]!r} has {len(hot)} positive labels")
            records.append((f"{row[image_column]}{extension}", hot[0]))
    return Manifest(records, image_dir, classes)
