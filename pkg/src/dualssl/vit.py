"""Vision Transformer encoder returning the final class-token feature."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Dropout, GELU, LayerNorm, Linear, Module, Parameter
from .rng import CounterRNG
from .tensor import Tensor


@dataclass
class ViTConfig:
    image_size: int = 28
    patch_size: int = 7
    in_channels: int = 1
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    drop_rate: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "in_channels", "embed_dim", "depth", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ViTConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError(f"drop_rate must be in [0, 1), got {self.drop_rate}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def replace(self, **changes) -> "ViTConfig":
        return dataclasses.replace(self, **changes)


PRESETS = {
    "vit-base": dict(embed_dim=768, depth=12, num_heads=12),
    "vit-desk": dict(embed_dim=64, depth=2, num_heads=4),
}


def preset(name: str, **overrides) -> ViTConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ViTConfig(**{**PRESETS[name], **overrides})


def parameter_count(config: ViTConfig) -> int:
    """Closed-form number of trainable scalars in :class:`ViTModel`."""
    d, h = config.embed_dim, config.mlp_hidden
    embed = config.patch_dim * d + d + d + (config.num_patches + 1) * d
    block = (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (2 * d) + (d * h + h) + (h * d + d)
    return embed + config.depth * block + 2 * d


def patchify(images, config: ViTConfig) -> Tensor:
    """``[n, C, H, W]`` -> ``[n, P, C*p*p]``; patches row-major, pixels channel-major."""
    images = T.as_tensor(images)
    if images.ndim != 4:
        raise ShapeError(f"expected images of shape [n, C, H, W], got {images.shape}")
    n, c, h, w = images.shape
    p = config.patch_size
    if h % p or w % p:
        raise ConfigError(f"image size {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(n, c, gh, p, gw, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, gh * gw, c * p * p)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, num_heads: int, rng: CounterRNG, drop_rate: float = 0.0):
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng.split(0))
        self.proj = Linear(dim, dim, rng.split(1))
        self.drop = Dropout(drop_rate, rng.split(2))
        self.last_attention = None

    def forward(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        qkv = self.qkv(x).reshape(n, t, 3, self.num_heads, self.head_dim)
        qkv = qkv.transpose(2, 0, 3, 1, 4)  # [3, n, heads, t, head_dim]
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * self.scale
        attn = T.softmax(scores, axis=-1)
        self.last_attention = attn.data
        out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return self.drop(self.proj(out))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, config: ViTConfig, rng: CounterRNG):
        d = config.embed_dim
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, config.num_heads, rng.split(0), config.drop_rate)
        self.norm2 = LayerNorm(d)
        self.fc1 = Linear(d, config.mlp_hidden, rng.split(1))
        self.act = GELU()
        self.fc2 = Linear(config.mlp_hidden, d, rng.split(2))
        self.drop = Dropout(config.drop_rate, rng.split(3))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.drop(self.fc2(self.act(self.fc1(self.norm2(x)))))


class ViTModel(Module):
    """Patch embedding, learned class token and positions, ``depth`` blocks, final norm."""

    def __init__(self, config: ViTConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = CounterRNG(seed)
        d = config.embed_dim
        self.patch_embed = Linear(config.patch_dim, d, rng.split(0))
        self.cls_token = Parameter(rng.split(1).normal((1, 1, d), scale=0.02))
        self.pos_embed = Parameter(rng.split(2).normal((1, config.num_patches + 1, d), scale=0.02))
        self.pos_drop = Dropout(config.drop_rate, rng.split(3))
        self.blocks = [Block(config, rng.split(100 + i)) for i in range(config.depth)]
        self.norm = LayerNorm(d)

    def forward(self, images) -> Tensor:
        images = T.as_tensor(images)
        c = self.config
        if images.ndim != 4 or images.shape[1:] != (c.in_channels, c.image_size, c.image_size):
            raise ShapeError(
                f"expected images [n, {c.in_channels}, {c.image_size}, {c.image_size}], got {images.shape}")
        n = images.shape[0]
        tokens = self.patch_embed(patchify(images, c))
        cls = T.broadcast_to(self.cls_token, (n, 1, c.embed_dim))
        x = T.concat([cls, tokens], axis=1) + self.pos_embed
        x = self.pos_drop(x)
        for block in self.blocks:
            x = block(x)
        return self.norm(x[:, 0])
