"""Report figures rendered to files (Agg backend, no display needed)."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across reruns
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def saliency_composite(path, images: Sequence[np.ndarray], maps: Sequence[np.ndarray],
                       titles: Sequence[str], ratios: np.ndarray | None = None) -> None:
    """Images on the top row, their saliency maps below, optional ratio grid at the end."""
    n = len(images)
    cols = n + (1 if ratios is not None else 0)
    fig, axes = plt.subplots(2, cols, figsize=(2.4 * cols, 4.8), squeeze=False)
    for i in range(n):
        axes[0, i].imshow(np.clip(images[i], 0, 1))
        axes[0, i].set_title(titles[i], fontsize=9)
        axes[1, i].imshow(maps[i], cmap="gray")
    if ratios is not None:
        im = axes[1, n].imshow(ratios, cmap="magma", vmin=0, vmax=1)
        axes[1, n].set_title("patch ratios", fontsize=9)
        fig.colorbar(im, ax=axes[1, n], fraction=0.046)
        axes[0, n].axis("off")
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


def mixed_panels(path, rows: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
                 captions: Sequence[str]) -> None:
    """One row per sample: tail, head, mixed."""
    n = len(rows)
    fig, axes = plt.subplots(n, 3, figsize=(6.6, 2.2 * n), squeeze=False)
    for i, (tail, head, mixed) in enumerate(rows):
        for j, (img, name) in enumerate(zip((tail, head, mixed), ("tail", "head", "mixed"))):
            axes[i, j].imshow(np.clip(img, 0, 1))
            axes[i, j].set_xticks([])
            axes[i, j].set_yticks([])
            if i == 0:
                axes[i, j].set_title(name, fontsize=9)
        axes[i, 0].set_ylabel(captions[i], fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def confusion_figure(path, cm: np.ndarray, class_names: Sequence[str]) -> None:
    cm = np.asarray(cm)
    rows = cm.sum(axis=1, keepdims=True)
    frac = np.divide(cm, rows, out=np.zeros(cm.shape), where=rows > 0)
    k = len(class_names)
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * k, 0.8 + 0.8 * k))
    ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center", fontsize=8,
                    color="white" if frac[i, j] > 0.5 else "black")
    ax.set_xticks(range(k), class_names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(k), class_names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    _save(fig, path)


def variant_bars(path, variants: Sequence[str], columns: dict[str, Sequence[float | None]]) -> None:
    """Grouped bars, one group per variant and one bar per metric column (values in [0, 1])."""
    names = list(columns)
    x = np.arange(len(variants))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(variants), 3.4))
    for i, name in enumerate(names):
        vals = [np.nan if v is None else 100 * v for v in columns[name]]
        ax.bar(x + (i - (len(names) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(x, variants, rotation=20, fontsize=8)
    ax.set_ylabel("accuracy / F1 (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7, ncol=len(names))
    fig.tight_layout()
    _save(fig, path)


def training_curves(path, logs: dict[str, Sequence[float]]) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, losses in logs.items():
        ax.plot(np.arange(1, len(losses) + 1), losses, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
