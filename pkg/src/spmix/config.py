"""Run configuration: built-in defaults < key-value file < command-line flags."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .imaging import AugmentationPolicy
from .training import VARIANTS, TrainSettings


def _doc(text: str, **kw):
    return field(metadata={"doc": text}, **kw)


@dataclass
class RunConfig:
    seed: int = _doc("master seed for sampling, augmentation, noise and init", default=0)
    variant: str = _doc("training recipe: " + ", ".join(VARIANTS), default="spmix")
    objective: str = _doc("auto | scl | ce; auto follows the variant", default="auto")
    # mixing
    alpha: float = _doc("clip threshold on the per-pixel mixup ratio", default=0.8)
    grid: int = _doc("patch grid side G (tokens per side)", default=8)
    windows: tuple = _doc("center-surround window sizes (odd)", default=(9, 25, 49))
    noise: float = _doc("uniform noise amplitude added to merged saliency", default=0.1)
    ratio_order: str = _doc("clip_first | average_first", default="clip_first")
    mixup_beta: float = _doc("Beta(b, b) parameter for random mixing ratios", default=1.0)
    # encoder
    input_size: int = _doc("square input side in pixels", default=64)
    dim: int = _doc("token feature dimension", default=64)
    depth: int = _doc("transformer blocks", default=2)
    heads: int = _doc("attention heads", default=4)
    proj_dim: int = _doc("projection (embedding) dimension", default=32)
    mlp_ratio: int = _doc("MLP hidden width as a multiple of dim", default=2)
    stem: str = _doc("conv | patchify", default="conv")
    stem_channels: tuple = _doc("channels of the two stride-2 stem convs", default=(16, 32))
    stem_kernel: int = _doc("kernel of the stride-2 stem convs (2 or 3)", default=2)
    pos_embed: bool = _doc("learned positional embeddings added after mixing", default=True)
    key_momentum: float = _doc("key encoder EMA coefficient m", default=0.99)
    # optimisation
    epochs: int = _doc("training epochs", default=30)
    batch_size: int = _doc("batch size B", default=64)
    lr: float = _doc("AdamW learning rate", default=1e-3)
    weight_decay: float = _doc("AdamW decoupled weight decay", default=0.1)
    beta1: float = _doc("AdamW first-moment decay", default=0.9)
    beta2: float = _doc("AdamW second-moment decay", default=0.999)
    adam_eps: float = _doc("AdamW epsilon", default=1e-8)
    temperature: float = _doc("contrastive temperature", default=0.2)
    precision: str = _doc("float32 | float64 for training", default="float32")
    # augmentation
    crop_min: float = _doc("min area fraction of the random resized crop", default=0.6)
    crop_max: float = _doc("max area fraction of the random resized crop", default=1.0)
    flip_prob: float = _doc("horizontal flip probability", default=0.5)
    jitter: float = _doc("brightness/contrast jitter amplitude", default=0.2)
    # protocol
    many_min: int = _doc("classes with at least this many samples are Many (heads)", default=1000)
    few_max: int = _doc("classes with at most this many samples are Few", default=200)
    probe_epochs: int = _doc("linear probe epochs", default=100)
    probe_lr: float = _doc("linear probe learning rate", default=1e-2)

    def __post_init__(self):
        self.windows = tuple(int(w) for w in self.windows)
        self.stem_channels = tuple(int(c) for c in self.stem_channels)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.objective not in ("auto", "scl", "ce"):
            raise ValueError(f"objective must be auto, scl or ce, got {self.objective!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    # ------------------------------------------------------------ views

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(input_size=self.input_size, grid=self.grid, dim=self.dim, depth=self.depth,
                             heads=self.heads, proj_dim=self.proj_dim, mlp_ratio=self.mlp_ratio,
                             stem=self.stem, stem_channels=self.stem_channels,
                             stem_kernel=self.stem_kernel, pos_embed=self.pos_embed)

    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy((self.crop_min, self.crop_max), self.flip_prob, self.jitter)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            variant=self.variant, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps,
            temperature=self.temperature, alpha=self.alpha, grid=self.grid, noise=self.noise,
            windows=self.windows, ratio_order=self.ratio_order, key_momentum=self.key_momentum,
            mixup_beta=self.mixup_beta, objective=None if self.objective == "auto" else self.objective,
            policy=self.policy())

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    # ------------------------------------------------------------ io

    @classmethod
    def docs(cls) -> dict[str, str]:
        return {f.name: f.metadata.get("doc", "") for f in fields(cls)}

    @classmethod
    def defaults(cls) -> dict:
        return {f.name: f.default for f in fields(cls)}

    def to_text(self) -> str:
        lines = []
        docs = self.docs()
        for f in fields(self):
            lines.append(f"# {docs[f.name]}")
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def build(cls, file_path=None, overrides: dict | None = None) -> "RunConfig":
        values = cls.defaults()
        if file_path is not None:
            values.update(read_kv(file_path))
        for k, v in (overrides or {}).items():
            if v is not None:
                values[k] = v
        return cls(**values)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_value(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_kv(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys raise."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    defaults = RunConfig.defaults()
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = parse_value(key, raw, defaults[key])
    return out
