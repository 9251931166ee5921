"""Supervised contrastive training of the query/key encoders with SPMix views."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import ConfigurationError
from .encoder import EncoderConfig, EncoderPair, init_params, stem_forward, transformer_forward
from .imaging import AugmentationPolicy, augment_view
from .mixup import mix_features, mixing_ratios
from .saliency import DEFAULT_WINDOWS

log = logging.getLogger(__name__)

VARIANTS = ("ce", "ce-resample", "vanilla-mixup", "patch-only", "saliency-only", "spmix")

# variant -> (objective, balanced sampling, ratio mode or None)
VARIANT_RECIPES = {
    "ce": ("ce", False, None),
    "ce-resample": ("ce", True, None),
    "vanilla-mixup": ("scl", True, "random_scalar"),
    "patch-only": ("scl", True, "random_patch"),
    "saliency-only": ("scl", True, "saliency_scalar"),
    "spmix": ("scl", True, "saliency_patch"),
}


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- loss

def supcon_loss(features, labels: Sequence[int], temperature: float) -> ad.Tensor:
    """SupCon over a single pool of unit embeddings.

    Each embedding is an anchor contrasted against all others; anchors with
    no same-label partner are left out of the mean.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = ad.as_tensor(features)
    labels = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise ValueError("contrastive pool needs at least two embeddings")
    not_self = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & not_self
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    if not valid.any():
        return ad.mul(ad.tsum(z), 0.0)
    sim = ad.mul(ad.matmul(z, ad.transpose(z)), 1.0 / temperature)
    logp = ad.log_softmax(sim, axis=1, mask=not_self)
    weights = np.where(pos, 1.0 / np.maximum(n_pos, 1)[:, None], 0.0) / valid.sum()
    return ad.mul(ad.tsum(ad.mul(logp, weights.astype(z.data.dtype))), -1.0)


def scl_loss(query, key, labels: Sequence[int], temperature: float = 0.2) -> ad.Tensor:
    """SupCon over the 2B pool [query; key]; the key side carries no gradient."""
    query = ad.as_tensor(query)
    key_data = key.data if isinstance(key, ad.Tensor) else np.asarray(key)
    if query.shape[0] < 2:
        raise ValueError(f"batch size must be >= 2, got {query.shape[0]}")
    if key_data.shape != query.shape:
        raise ad.ShapeError(f"scl_loss: query {query.shape} vs key {key_data.shape}")
    labels = np.asarray(labels)
    pool = ad.concat([query, ad.Tensor(key_data)], axis=0)
    return supcon_loss(pool, np.concatenate([labels, labels]), temperature)


def cross_entropy(logits: ad.Tensor, targets: np.ndarray) -> ad.Tensor:
    """Mean CE against hard labels (int array) or soft targets (B, K)."""
    logp = ad.log_softmax(logits, axis=-1)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
        onehot[np.arange(len(targets)), targets] = 1.0
        targets = onehot
    return ad.mul(ad.tsum(ad.mul(logp, targets.astype(logits.data.dtype))), -1.0 / logits.shape[0])


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamW:
    params: dict[str, ad.Tensor]
    lr: float = 5e-6
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.1
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data = p.data * (1.0 - self.lr * self.weight_decay)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = (p.data - self.lr * update).astype(p.data.dtype)


def grad_norm(params: dict[str, ad.Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                         for p in params.values() if p.grad is not None))


# ---------------------------------------------------------------- sampling

def sample_balanced_batch(labels: Sequence[int], head_classes, batch_size: int,
                          rng: np.random.Generator, balanced: bool = True,
                          pair_tails: bool = True) -> list[tuple[int, int | None]]:
    """Draw (index, head partner index or None) pairs.

    Classes are drawn uniformly when ``balanced``; otherwise instances are
    drawn uniformly. Tail draws get a head partner sampled uniformly over
    all head-class images; head draws pass through unmixed.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("training set is empty")
    head_classes = set(int(c) for c in head_classes)
    head_idx = np.flatnonzero(np.isin(labels, sorted(head_classes)))
    if pair_tails and head_idx.size == 0:
        raise ConfigurationError("no head class configured: SPMix needs at least one head class with samples")
    classes = np.unique(labels)
    by_class = {int(c): np.flatnonzero(labels == c) for c in classes}
    out = []
    for _ in range(batch_size):
        if balanced:
            c = int(classes[rng.integers(len(classes))])
            i = int(by_class[c][rng.integers(len(by_class[c]))])
        else:
            i = int(rng.integers(labels.size))
            c = int(labels[i])
        partner = None
        if pair_tails and c not in head_classes:
            partner = int(head_idx[rng.integers(head_idx.size)])
        out.append((i, partner))
    return out


# ---------------------------------------------------------------- training loop

@dataclass
class TrainSettings:
    variant: str = "spmix"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 0.2
    alpha: float = 0.8
    grid: int = 8
    noise: float = 0.1
    windows: tuple[int, ...] = DEFAULT_WINDOWS
    ratio_order: str = "clip_first"
    key_momentum: float = 0.99
    mixup_beta: float = 1.0
    objective: str | None = None
    steps_per_epoch: int | None = None
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def recipe(self) -> tuple[str, bool, str | None]:
        if self.variant not in VARIANT_RECIPES:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        objective, balanced, mode = VARIANT_RECIPES[self.variant]
        if self.objective is not None:
            objective = self.objective
        return objective, balanced, mode


@dataclass
class TrainState:
    pair: EncoderPair
    optimizer: AdamW
    classifier: dict[str, ad.Tensor] = field(default_factory=dict)
    step: int = 0


def new_state(cfg: EncoderConfig, settings: TrainSettings, n_classes: int, seed: int,
              dtype=np.float64) -> TrainState:
    rng = np.random.default_rng([seed, 1])
    pair = EncoderPair(cfg, init_params(cfg, rng, dtype), momentum=settings.key_momentum)
    objective, _, _ = settings.recipe()
    classifier = {}
    if objective == "ce":
        classifier = {
            "cls.w": ad.Tensor(rng.normal(0, 1 / np.sqrt(cfg.dim), (cfg.dim, n_classes)).astype(dtype),
                               requires_grad=True, name="cls.w"),
            "cls.b": ad.Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True, name="cls.b"),
        }
    params = dict(pair.query)
    params.update(classifier)
    opt = AdamW(params, lr=settings.lr, betas=(settings.beta1, settings.beta2),
                weight_decay=settings.weight_decay, eps=settings.adam_eps)
    return TrainState(pair, opt, classifier)


@dataclass
class PreparedBatch:
    view1: np.ndarray          # (B, H, W, C) tail-slot images, first view
    view2: np.ndarray
    partner1: np.ndarray       # (M, H, W, C) head partners, first view
    partner2: np.ndarray
    partner_slot: np.ndarray   # (B,) index into partners or -1
    r1: np.ndarray             # (B, G, G)
    r2: np.ndarray
    labels: np.ndarray
    partner_labels: np.ndarray  # (B,) head label or own label


def prepare_batch(images: np.ndarray, labels: np.ndarray, draws, settings: TrainSettings,
                  mode: str | None, rng: np.random.Generator) -> PreparedBatch:
    """Augment views and compute ratio grids for a list of sampler draws.

    All views are drawn first (in draw order: t1, h1, t2, h2 for paired
    draws, v1, v2 otherwise); ratio grids for view 1 then view 2 follow.
    """
    G = settings.grid
    B = len(draws)
    v1, v2, p1, p2, slot, plab = [], [], [], [], [], []
    for i, partner in draws:
        if partner is None or mode is None:
            v1.append(augment_view(images[i], settings.policy, rng))
            v2.append(augment_view(images[i], settings.policy, rng))
            slot.append(-1)
            plab.append(labels[i])
            continue
        v1.append(augment_view(images[i], settings.policy, rng))
        p1.append(augment_view(images[partner], settings.policy, rng))
        v2.append(augment_view(images[i], settings.policy, rng))
        p2.append(augment_view(images[partner], settings.policy, rng))
        slot.append(len(p1) - 1)
        plab.append(labels[partner])
    v1, v2 = np.stack(v1), np.stack(v2)
    slot = np.asarray(slot)
    r1 = np.ones((B, G, G))
    r2 = np.ones((B, G, G))
    if p1:
        p1, p2 = np.stack(p1), np.stack(p2)
        tails = slot >= 0
        kw = dict(windows=settings.windows, order=settings.ratio_order, beta=settings.mixup_beta)
        r1[tails] = mixing_ratios(v1[tails], p1, mode, G, settings.alpha, settings.noise, rng, **kw)
        r2[tails] = mixing_ratios(v2[tails], p2, mode, G, settings.alpha, settings.noise, rng, **kw)
    else:
        p1 = p2 = np.zeros((0,) + images.shape[1:], dtype=images.dtype)
    return PreparedBatch(v1, v2, p1, p2, slot, r1, r2,
                         np.asarray([labels[i] for i, _ in draws]), np.asarray(plab))


def _mixed_tokens(stem_fn, views: np.ndarray, partners: np.ndarray, slot: np.ndarray,
                  ratios: np.ndarray) -> ad.Tensor:
    B = views.shape[0]
    tokens = stem_fn(np.concatenate([views, partners]) if len(partners) else views)
    f_t = ad.take(tokens, np.arange(B), axis=0) if len(partners) else tokens
    if not len(partners):
        return f_t
    gather = np.where(slot >= 0, B + slot, np.arange(B))
    f_h = ad.take(tokens, gather, axis=0)
    return mix_features(f_t, f_h, ratios)


def batch_loss(state: TrainState, batch: PreparedBatch, settings: TrainSettings) -> ad.Tensor:
    """Forward pass for one prepared batch; call inside an active Graph."""
    pair, cfg = state.pair, state.pair.cfg
    objective, _, _ = settings.recipe()
    tokens1 = _mixed_tokens(lambda x: stem_forward(x, pair.query, cfg),
                            batch.view1, batch.partner1, batch.partner_slot, batch.r1)
    if objective == "ce":
        feats = transformer_forward(tokens1, pair.query, cfg)
        logits = ad.linear(feats, state.classifier["cls.w"], state.classifier["cls.b"])
        K = state.classifier["cls.b"].shape[0]
        lam = batch.r1.mean(axis=(1, 2))
        soft = np.zeros((len(lam), K))
        soft[np.arange(len(lam)), batch.labels] += lam
        soft[np.arange(len(lam)), batch.partner_labels] += 1.0 - lam
        return cross_entropy(logits, soft)
    q = pair.query_forward(tokens1)
    with ad.no_grad():
        tokens2 = _mixed_tokens(pair.key_stem, batch.view2, batch.partner2, batch.partner_slot, batch.r2)
        k = pair.key_forward(tokens2)
    return scl_loss(q, k, batch.labels, settings.temperature)


def train_step(state: TrainState, batch: PreparedBatch, settings: TrainSettings) -> tuple[float, float]:
    with ad.Graph() as graph:
        loss = batch_loss(state, batch, settings)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {state.step}")
    ad.backward(graph, loss)
    gn = grad_norm(state.optimizer.params)
    state.optimizer.step()
    state.pair.momentum_update()
    state.step += 1
    return value, gn


def steps_per_epoch(n_train: int, settings: TrainSettings) -> int:
    if settings.steps_per_epoch:
        return settings.steps_per_epoch
    return max(1, math.ceil(n_train / settings.batch_size))


def train_epoch(state: TrainState, images: np.ndarray, labels: np.ndarray, head_classes,
                settings: TrainSettings, rng: np.random.Generator) -> dict:
    """One pass of ``ceil(N / B)`` steps; returns mean loss and grad norm."""
    objective, balanced, mode = settings.recipe()
    losses, norms = [], []
    t0 = time.perf_counter()
    for _ in range(steps_per_epoch(len(labels), settings)):
        draws = sample_balanced_batch(labels, head_classes, settings.batch_size, rng,
                                      balanced=balanced, pair_tails=mode is not None)
        batch = prepare_batch(images, labels, draws, settings, mode, rng)
        loss, gn = train_step(state, batch, settings)
        losses.append(loss)
        norms.append(gn)
    return {"loss": float(np.mean(losses)), "grad_norm": float(np.mean(norms)),
            "wall_time": time.perf_counter() - t0}


def train(images: np.ndarray, labels: np.ndarray, n_classes: int, head_classes,
          cfg: EncoderConfig, settings: TrainSettings, seed: int, dtype=np.float64,
          on_epoch=None) -> TrainState:
    """Full training run; ``on_epoch(epoch, metrics)`` is called after each epoch."""
    state = new_state(cfg, settings, n_classes, seed, dtype)
    rng = np.random.default_rng([seed, 2])
    images = images.astype(dtype, copy=False)
    for epoch in range(1, settings.epochs + 1):
        metrics = train_epoch(state, images, labels, head_classes, settings, rng)
        log.info("epoch %d loss %.5f grad-norm %.4f (%.1fs)", epoch, metrics["loss"],
                 metrics["grad_norm"], metrics["wall_time"])
        if on_epoch is not None:
            on_epoch(epoch, metrics)
    return state
