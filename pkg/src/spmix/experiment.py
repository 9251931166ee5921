"""End-to-end runs: train an encoder variant, probe it, evaluate it, and the
patch/saliency ablation grid on top."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .data import SubsetPartition
from .encoder import EncoderConfig
from .evaluation import MetricsReport, evaluate, extract_features, train_linear_probe
from .training import TrainSettings, TrainState, train

log = logging.getLogger(__name__)

# Table-2-shaped grid: (patch-based mixup, saliency guidance) -> variant
ABLATION_GRID = (
    (False, False, "vanilla-mixup"),
    (True, False, "patch-only"),
    (False, True, "saliency-only"),
    (True, True, "spmix"),
)


@dataclass
class RunResult:
    variant: str
    seed: int
    metrics: MetricsReport
    state: TrainState | None = None
    epoch_log: list[dict] | None = None


def run_variant(train_images: np.ndarray, train_labels: np.ndarray, test_images: np.ndarray,
                test_labels: np.ndarray, partition: SubsetPartition, class_names: Sequence[str],
                cfg: EncoderConfig, settings: TrainSettings, seed: int, probe_epochs: int = 100,
                dtype=np.float32, on_epoch: Callable | None = None, keep_state: bool = False) -> RunResult:
    K = len(class_names)
    epochs: list[dict] = []

    def record(epoch, metrics):
        epochs.append({"epoch": epoch, **metrics})
        if on_epoch is not None:
            on_epoch(epoch, metrics)

    state = train(train_images, train_labels, K, partition.head_classes, cfg, settings, seed,
                  dtype=dtype, on_epoch=record)
    feats = extract_features(train_images.astype(dtype), state.pair.query, cfg)
    probe = train_linear_probe(feats, train_labels, K, probe_epochs, np.random.default_rng([seed, 3]))
    report = evaluate(probe, state.pair.query, cfg, test_images.astype(dtype), test_labels,
                      partition, class_names)
    log.info("%s seed %d: total %.4f F1 %.4f few %s", settings.variant, seed,
             report.total_accuracy, report.macro_f1, report.subset_accuracy.get("Few"))
    return RunResult(settings.variant, seed, report, state if keep_state else None, epochs)


def run_grid(variants: Sequence[str], seeds: Sequence[int], run: Callable[[str, int], RunResult]) -> list[RunResult]:
    return [run(v, s) for v in variants for s in seeds]


def median_by_variant(results: Sequence[RunResult], key: Callable[[MetricsReport], float | None]) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in results:
        v = key(r.metrics)
        if v is not None:
            out.setdefault(r.variant, []).append(v)
    return {k: float(np.median(v)) for k, v in out.items()}


def settings_for(base: TrainSettings, variant: str) -> TrainSettings:
    return replace(base, variant=variant)


def format_runs(results: Sequence[RunResult]) -> str:
    """Delimited table, one row per (variant, seed) plus one median row per variant."""
    header = "variant\tseed\tacc_many\tacc_medium\tacc_few\tacc_total\tmacro_f1"
    lines = [header]

    def cell(v):
        return "n/a" if v is None else f"{100 * v:.2f}"

    for r in results:
        a = r.metrics.subset_accuracy
        lines.append("\t".join([r.variant, str(r.seed), cell(a.get("Many")), cell(a.get("Medium")),
                                cell(a.get("Few")), cell(r.metrics.total_accuracy), cell(r.metrics.macro_f1)]))
    variants = list(dict.fromkeys(r.variant for r in results))
    keys = [lambda m: m.subset_accuracy.get("Many"), lambda m: m.subset_accuracy.get("Medium"),
            lambda m: m.subset_accuracy.get("Few"), lambda m: m.total_accuracy, lambda m: m.macro_f1]
    meds = [median_by_variant(results, k) for k in keys]
    for v in variants:
        lines.append("\t".join([v, "median"] + [cell(m.get(v)) for m in meds]))
    return "\n".join(lines) + "\n"


def format_ablation(results: Sequence[RunResult]) -> str:
    """Patch / saliency check-mark grid with median accuracy and F1."""
    acc = median_by_variant(results, lambda m: m.total_accuracy)
    f1 = median_by_variant(results, lambda m: m.macro_f1)
    few = median_by_variant(results, lambda m: m.subset_accuracy.get("Few"))
    lines = ["patch_mixup\tsaliency_guidance\tvariant\tacc\tf1\tacc_few"]
    for patch, sal, v in ABLATION_GRID:
        if v not in acc:
            continue
        lines.append("\t".join(["yes" if patch else "no", "yes" if sal else "no", v,
                                f"{100 * acc[v]:.2f}", f"{100 * f1[v]:.2f}",
                                "n/a" if v not in few else f"{100 * few[v]:.2f}"]))
    return "\n".join(lines) + "\n"


def synthetic_arrays(spec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """In-memory synthetic images, quantised to 8 bits exactly as a PNG round trip would be."""
    from .data import synthesize_image
    from .imaging import quantize

    imgs, labels = [], []
    for k, n in enumerate(spec.counts):
        rng = np.random.default_rng([seed, k])
        for _ in range(n):
            img, _ = synthesize_image(k, rng, spec)
            imgs.append(quantize(img) / 255.0)
            labels.append(k)
    return np.stack(imgs), np.asarray(labels, dtype=np.int64)
