"""Linear probing of frozen encoders and Many/Medium/Few metrics."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import SUBSETS, SubsetPartition
from .encoder import EncoderConfig, Params, encode
from .training import AdamW, cross_entropy


def extract_features(images: np.ndarray, params: Params, cfg: EncoderConfig,
                     batch_size: int = 128) -> np.ndarray:
    """Pooled transformer features of unaugmented, unmixed images."""
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(encode(images[i:i + batch_size], params, cfg).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, cfg.dim))


@dataclass
class LinearProbe:
    weight: np.ndarray      # (D, K)
    bias: np.ndarray        # (K,)
    mean: np.ndarray        # feature standardisation
    scale: np.ndarray
    history: list[float]

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, feats: np.ndarray) -> np.ndarray:
        # argmax breaks ties toward the lowest class id
        return np.argmax(self.logits(feats), axis=1)

    def save(self, path) -> None:
        ad.save_tensors(path, {"probe.w": self.weight, "probe.b": self.bias,
                               "probe.mean": self.mean, "probe.scale": self.scale})

    @classmethod
    def load(cls, path) -> "LinearProbe":
        if not Path(path).exists():
            raise FileNotFoundError(f"missing probe checkpoint {path}")
        t = ad.load_tensors(path)
        return cls(t["probe.w"], t["probe.b"], t["probe.mean"], t["probe.scale"], [])


def balanced_loss(probe: LinearProbe, feats: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Class-balanced mean cross-entropy of the probe on a labelled set."""
    z = probe.logits(feats)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(len(labels)), labels]
    per_class = [nll[labels == k].mean() for k in range(n_classes) if np.any(labels == k)]
    return float(np.mean(per_class))


def train_linear_probe(feats: np.ndarray, labels: np.ndarray, n_classes: int, epochs: int,
                       rng: np.random.Generator, lr: float = 1e-2, batch_size: int = 64,
                       weight_decay: float = 1e-4) -> LinearProbe:
    """Softmax regression on standardised frozen features.

    Each epoch draws ``len(labels)`` samples with classes chosen uniformly.
    Weights start at zero.
    """
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0) + 1e-6
    x = (feats - mean) / scale
    D = feats.shape[1]
    W = ad.Tensor(np.zeros((D, n_classes)), requires_grad=True)
    b = ad.Tensor(np.zeros(n_classes), requires_grad=True)
    opt = AdamW({"w": W, "b": b}, lr=lr, weight_decay=weight_decay)
    probe = LinearProbe(W.data, b.data, mean, scale, [])
    by_class = [np.flatnonzero(labels == k) for k in range(n_classes)]
    present = [k for k in range(n_classes) if by_class[k].size]
    n = len(labels)
    for _ in range(epochs):
        cls = np.asarray(present)[rng.integers(len(present), size=n)]
        idx = np.array([by_class[c][rng.integers(by_class[c].size)] for c in cls])
        for i in range(0, n, batch_size):
            sel = idx[i:i + batch_size]
            with ad.Graph() as g:
                loss = cross_entropy(ad.linear(ad.Tensor(x[sel]), W, b), labels[sel])
            ad.backward(g, loss)
            opt.step()
        probe = LinearProbe(W.data, b.data, mean, scale, probe.history)
        probe.history.append(balanced_loss(probe, feats, labels, n_classes))
    return LinearProbe(W.data.copy(), b.data.copy(), mean, scale, probe.history)


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    subset_accuracy: dict[str, float | None]
    total_accuracy: float
    macro_f1: float
    per_class_f1: list[float]
    confusion: np.ndarray
    class_names: list[str]

    def as_kv(self) -> list[tuple[str, str]]:
        rows = []
        for s in SUBSETS:
            v = self.subset_accuracy.get(s)
            rows.append((f"acc_{s.lower()}", "n/a" if v is None else f"{v:.6f}"))
        rows.append(("acc_total", f"{self.total_accuracy:.6f}"))
        rows.append(("macro_f1", f"{self.macro_f1:.6f}"))
        for name, f in zip(self.class_names, self.per_class_f1):
            rows.append((f"f1[{name}]", f"{f:.6f}"))
        for i, name in enumerate(self.class_names):
            rows.append((f"confusion[{name}]", ",".join(str(int(v)) for v in self.confusion[i])))
        return rows

    def write_kv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for k, v in self.as_kv():
                fh.write(f"{k}={v}\n")

    def table(self) -> str:
        def pct(v):
            return "  n/a " if v is None else f"{100 * v:6.2f}"
        acc = self.subset_accuracy
        lines = ["  Many    Med    Few  Total     F1",
                 f"{pct(acc.get('Many'))} {pct(acc.get('Medium'))} {pct(acc.get('Few'))} "
                 f"{pct(self.total_accuracy)} {pct(self.macro_f1)}",
                 "", "confusion (rows: true, cols: predicted)"]
        width = max(len(n) for n in self.class_names)
        for name, row in zip(self.class_names, self.confusion):
            lines.append(f"{name:>{width}} " + " ".join(f"{int(v):5d}" for v in row))
        return "\n".join(lines)


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def f1_from_confusion(cm: np.ndarray) -> np.ndarray:
    """Per-class F1; 0 where precision and recall are both undefined or zero."""
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def metrics_from_confusion(cm: np.ndarray, partition: SubsetPartition | None,
                           class_names: Sequence[str] | None = None) -> MetricsReport:
    cm = np.asarray(cm)
    K = cm.shape[0]
    names = list(class_names) if class_names is not None else [str(k) for k in range(K)]
    correct = np.diag(cm)
    support = cm.sum(axis=1)
    subset_acc: dict[str, float | None] = {}
    for s in SUBSETS:
        ks = partition.classes_in(s) if partition is not None else []
        n = support[ks].sum() if ks else 0
        subset_acc[s] = float(correct[ks].sum() / n) if n else None
    f1 = f1_from_confusion(cm)
    present = support > 0
    return MetricsReport(subset_acc, float(correct.sum() / cm.sum()),
                         float(f1[present].mean()) if present.any() else 0.0,
                         f1.tolist(), cm, names)


def evaluate_predictions(y_true, y_pred, n_classes: int, partition: SubsetPartition | None,
                         class_names: Sequence[str] | None = None) -> MetricsReport:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, n_classes), partition, class_names)


def evaluate(probe: LinearProbe, params: Params, cfg: EncoderConfig, images: np.ndarray,
             labels: np.ndarray, partition: SubsetPartition | None,
             class_names: Sequence[str] | None = None) -> MetricsReport:
    feats = extract_features(images, params, cfg)
    K = probe.bias.shape[0]
    return evaluate_predictions(labels, probe.predict(feats), K, partition, class_names)
