"""Query/key encoder pair: conv stem -> token mixing -> transformer -> projection."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad

Params = dict[str, ad.Tensor]


@dataclass
class EncoderConfig:
    input_size: int = 64
    grid: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 4
    proj_dim: int = 32
    mlp_ratio: int = 2
    stem: str = "conv"            # conv | patchify
    stem_channels: tuple[int, int] = (16, 32)
    stem_kernel: int = 2          # 2: patch-local stem; 3: overlapping (padding 1)
    in_channels: int = 3
    pos_embed: bool = True

    def __post_init__(self):
        self.stem_channels = tuple(int(c) for c in self.stem_channels)
        if self.input_size % self.grid:
            raise ValueError(f"input size {self.input_size} not divisible by grid {self.grid}")
        if self.dim % self.heads:
            raise ValueError(f"token dim {self.dim} not divisible by {self.heads} heads")
        if self.stem == "conv" and self.input_size % (4 * self.grid):
            raise ValueError(f"conv stem needs input size divisible by 4*grid, got {self.input_size}/{self.grid}")
        if self.stem_kernel not in (2, 3):
            raise ValueError(f"stem kernel must be 2 or 3, got {self.stem_kernel}")
        if self.stem not in ("conv", "patchify"):
            raise ValueError(f"unknown stem {self.stem!r}")

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @classmethod
    def paper_scale(cls) -> "EncoderConfig":
        return cls(input_size=224, grid=14, dim=768, depth=2, heads=12, proj_dim=128,
                   stem_channels=(32, 64))

    @classmethod
    def tiny(cls) -> "EncoderConfig":
        return cls(input_size=16, grid=2, dim=8, depth=1, heads=2, proj_dim=4,
                   stem_channels=(3, 4))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def init_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64) -> Params:
    """Fan-in scaled normal init; biases, LayerNorm shifts start at zero."""
    p: dict[str, np.ndarray] = {}

    def normal(shape, fan_in, gain=2.0):
        return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)

    C, D = cfg.in_channels, cfg.dim
    if cfg.stem == "conv":
        c1, c2 = cfg.stem_channels
        k = cfg.input_size // cfg.grid // 4
        s = cfg.stem_kernel
        p["stem.conv1.w"] = normal((s, s, C, c1), C * s * s)
        p["stem.conv1.b"] = np.zeros(c1)
        p["stem.conv2.w"] = normal((s, s, c1, c2), c1 * s * s)
        p["stem.conv2.b"] = np.zeros(c2)
        p["stem.patch.w"] = normal((k, k, c2, D), c2 * k * k, gain=1.0)
        p["stem.patch.b"] = np.zeros(D)
    else:
        k = cfg.input_size // cfg.grid
        p["stem.patch.w"] = normal((k, k, C, D), C * k * k, gain=1.0)
        p["stem.patch.b"] = np.zeros(D)
    if cfg.pos_embed:
        p["pos"] = rng.normal(0.0, 0.02, size=(cfg.tokens, D))
    H = cfg.mlp_ratio * D
    for i in range(cfg.depth):
        b = f"block{i}."
        p[b + "ln1.g"] = np.ones(D)
        p[b + "ln1.b"] = np.zeros(D)
        for name in ("q", "k", "v", "o"):
            p[b + f"attn.{name}.w"] = normal((D, D), D, gain=1.0)
            p[b + f"attn.{name}.b"] = np.zeros(D)
        p[b + "ln2.g"] = np.ones(D)
        p[b + "ln2.b"] = np.zeros(D)
        p[b + "mlp.fc1.w"] = normal((D, H), D)
        p[b + "mlp.fc1.b"] = np.zeros(H)
        p[b + "mlp.fc2.w"] = normal((H, D), H, gain=1.0)
        p[b + "mlp.fc2.b"] = np.zeros(D)
    p["proj.fc1.w"] = normal((D, D), D)
    p["proj.fc1.b"] = np.zeros(D)
    p["proj.fc2.w"] = normal((D, cfg.proj_dim), D, gain=1.0)
    p["proj.fc2.b"] = np.zeros(cfg.proj_dim)
    return {k: ad.Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in p.items()}


# fixed input centring; without it every image shares a large skin-tone offset
# and all embeddings start out nearly parallel
INPUT_SHIFT = 0.5
INPUT_SCALE = 4.0


def stem_forward(images, params: Params, cfg: EncoderConfig) -> ad.Tensor:
    """(B, H, W, C) images in [0, 1] -> (B, G*G, D) tokens."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:3] != (cfg.input_size, cfg.input_size):
        raise ad.ShapeError(f"stem: expected {cfg.input_size}x{cfg.input_size} input, got {images.shape[1:3]}")
    dtype = params["stem.patch.w"].data.dtype
    x = ad.Tensor((np.asarray(images, dtype=dtype) - INPUT_SHIFT) * INPUT_SCALE)
    if cfg.stem == "conv":
        pad = (cfg.stem_kernel - 1) // 2
        x = ad.relu(ad.conv2d(x, params["stem.conv1.w"], params["stem.conv1.b"], stride=2, padding=pad))
        x = ad.relu(ad.conv2d(x, params["stem.conv2.w"], params["stem.conv2.b"], stride=2, padding=pad))
        k = cfg.input_size // cfg.grid // 4
    else:
        k = cfg.input_size // cfg.grid
    x = ad.conv2d(x, params["stem.patch.w"], params["stem.patch.b"], stride=k)
    return ad.reshape(x, (x.shape[0], cfg.tokens, cfg.dim))


def _attention(x: ad.Tensor, params: Params, prefix: str, heads: int) -> ad.Tensor:
    B, N, D = x.shape
    dh = D // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (B, N, heads, dh)), (0, 2, 1, 3))

    q = split(ad.linear(x, params[prefix + "q.w"], params[prefix + "q.b"]))
    k = split(ad.linear(x, params[prefix + "k.w"], params[prefix + "k.b"]))
    v = split(ad.linear(x, params[prefix + "v.w"], params[prefix + "v.b"]))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, N, D))
    return ad.linear(ctx, params[prefix + "o.w"], params[prefix + "o.b"])


def transformer_tokens(tokens: ad.Tensor, params: Params, cfg: EncoderConfig) -> ad.Tensor:
    """Positional embedding plus pre-norm blocks; returns (B, N, D) tokens."""
    x = ad.as_tensor(tokens)
    if x.shape[-2] != cfg.tokens:
        raise ad.ShapeError(f"transformer: expected {cfg.tokens} tokens, got {x.shape[-2]}")
    if cfg.pos_embed:
        x = ad.add(x, params["pos"])
    for i in range(cfg.depth):
        b = f"block{i}."
        h = ad.layer_norm(x, params[b + "ln1.g"], params[b + "ln1.b"])
        x = ad.add(x, _attention(h, params, b + "attn.", cfg.heads))
        h = ad.layer_norm(x, params[b + "ln2.g"], params[b + "ln2.b"])
        h = ad.relu(ad.linear(h, params[b + "mlp.fc1.w"], params[b + "mlp.fc1.b"]))
        x = ad.add(x, ad.linear(h, params[b + "mlp.fc2.w"], params[b + "mlp.fc2.b"]))
    return x


def transformer_forward(tokens: ad.Tensor, params: Params, cfg: EncoderConfig) -> ad.Tensor:
    """Encode tokens and mean-pool them into a (B, D) feature."""
    return ad.mean_pool(transformer_tokens(tokens, params, cfg), axis=-2)


def project_normalize(f: ad.Tensor, params: Params) -> ad.Tensor:
    h = ad.relu(ad.linear(f, params["proj.fc1.w"], params["proj.fc1.b"]))
    z = ad.linear(h, params["proj.fc2.w"], params["proj.fc2.b"])
    return ad.l2_normalize(z, axis=-1)


def encode(images, params: Params, cfg: EncoderConfig) -> ad.Tensor:
    """Unmixed pooled feature of a batch of images."""
    return transformer_forward(stem_forward(images, params, cfg), params, cfg)


class EncoderPair:
    """Trainable query parameters and their momentum-tracked key copy."""

    def __init__(self, cfg: EncoderConfig, query: Params, key: Params | None = None,
                 momentum: float = 0.99):
        if not 0 <= momentum < 1:
            raise ValueError(f"key momentum must lie in [0, 1), got {momentum}")
        self.cfg = cfg
        self.query = query
        self.momentum = momentum
        if key is None:
            key = {k: ad.Tensor(v.data.copy(), name=k) for k, v in query.items()}
        self.key = key
        for name, t in self.key.items():
            t.requires_grad = False
        self._check_aligned()

    @classmethod
    def create(cls, cfg: EncoderConfig, seed: int = 0, momentum: float = 0.99, dtype=np.float64):
        return cls(cfg, init_params(cfg, np.random.default_rng(seed), dtype), momentum=momentum)

    def _check_aligned(self):
        if self.query.keys() != self.key.keys():
            raise ad.ShapeError("query and key parameter names differ")
        for name in self.query:
            if self.query[name].shape != self.key[name].shape:
                raise ad.ShapeError(f"parameter {name}: query {self.query[name].shape} "
                                    f"vs key {self.key[name].shape}")

    def momentum_update(self) -> None:
        """theta_k <- m * theta_k + (1 - m) * theta_q."""
        self._check_aligned()
        m = self.momentum
        for name, q in self.query.items():
            k = self.key[name]
            k.data = m * k.data + (1.0 - m) * q.data

    def key_forward(self, tokens: ad.Tensor) -> ad.Tensor:
        with ad.no_grad():
            return project_normalize(transformer_forward(tokens, self.key, self.cfg), self.key)

    def key_stem(self, images) -> ad.Tensor:
        with ad.no_grad():
            return stem_forward(images, self.key, self.cfg)

    def query_forward(self, tokens: ad.Tensor) -> ad.Tensor:
        return project_normalize(transformer_forward(tokens, self.query, self.cfg), self.query)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ad.save_tensors(directory / "query.ckpt", self.query)
        ad.save_tensors(directory / "key.ckpt", self.key)

    @classmethod
    def load(cls, directory, cfg: EncoderConfig, momentum: float = 0.99, dtype=np.float64):
        directory = Path(directory)
        for f in ("query.ckpt", "key.ckpt"):
            if not (directory / f).exists():
                raise FileNotFoundError(f"missing checkpoint {directory / f}")
        q = {k: ad.Tensor(v.astype(dtype), requires_grad=True, name=k)
             for k, v in ad.load_tensors(directory / "query.ckpt").items()}
        k = {n: ad.Tensor(v.astype(dtype), name=n) for n, v in ad.load_tensors(directory / "key.ckpt").items()}
        return cls(cfg, q, k, momentum)
