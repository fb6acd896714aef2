"""Hybrid ViT generator: patch tokens -> transformer encoders -> conv decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import (LEAKY_SLOPE, AttentionConfig, BatchNorm2d, Conv2d, ConvTranspose2d,
                 Embedding, LayerNorm, Linear, Module, TransformerEncoderLayer)
from .tensor import ConfigError, DimensionError, Tensor


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    patch_size: int = 8
    in_channels: int = 3
    out_channels: int = 3
    embed_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    residual_channels: int = 128
    num_residual_blocks: int = 1
    activation: str = "gelu"
    kind: str = "vit"  # "identity" is a pass-through stub for pipeline tests

    def __post_init__(self):
        if self.kind not in ("vit", "identity"):
            raise ConfigError(f"generator.kind must be 'vit' or 'identity', got {self.kind!r}")
        for name in ("image_size", "patch_size", "in_channels", "out_channels", "embed_dim",
                     "num_layers", "num_heads", "mlp_ratio", "residual_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"generator.{name} must be positive")
        if self.num_residual_blocks < 0:
            raise ConfigError("generator.num_residual_blocks must be >= 0")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.patch_size & (self.patch_size - 1):
            raise ConfigError(f"patch_size {self.patch_size} must be a power of two")
        AttentionConfig(self.embed_dim, self.num_heads)
        if self.residual_channels >> self.num_upsamples < 1:
            raise ConfigError(
                f"residual_channels {self.residual_channels} cannot be halved "
                f"{self.num_upsamples} times")
        if self.kind == "identity" and self.in_channels != self.out_channels:
            raise ConfigError("identity generator needs in_channels == out_channels")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_upsamples(self) -> int:
        return int(math.log2(self.patch_size))

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 2


def num_patches(image_size: int, patch_size: int) -> int:
    return (image_size // patch_size) ** 2


def extract_patches(img: Tensor, patch_size: int) -> Tensor:
    """(b, c, s, s) -> (b, (s/P)^2, c*P*P); patches row-major over the grid."""
    if img.ndim != 4 or img.shape[2] != img.shape[3]:
        raise DimensionError(f"expected square (b, c, s, s) images, got {img.shape}")
    b, c, s, _ = img.shape
    p = patch_size
    if s % p:
        raise ConfigError(f"image size {s} is not divisible by patch size {p}")
    g = s // p
    x = T.reshape(img, (b, c, g, p, g, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, g * g, c * p * p))


def reassemble_patches(patches: Tensor, channels: int, patch_size: int) -> Tensor:
    """Inverse of :func:`extract_patches`."""
    b, n, _ = patches.shape
    g = math.isqrt(n)
    if g * g != n:
        raise DimensionError(f"{n} patches do not form a square grid")
    p = patch_size
    x = T.reshape(patches, (b, g, g, channels, p, p))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    return T.reshape(x, (b, channels, g * p, g * p))


class PatchEmbedding(Module):
    """Linear projection of flattened patches plus a learned position table."""

    def __init__(self, patch_dim: int, num_patches: int, embed_dim: int,
                 rng: np.random.Generator):
        self.proj = Linear(patch_dim, embed_dim, rng)
        self.pos = Embedding(num_patches, embed_dim, rng)
        self.num_patches = num_patches

    def forward(self, patches: Tensor) -> Tensor:
        return embed_patches(patches, self.proj, self.pos)


def embed_patches(patches: Tensor, proj: Linear, pos: Embedding) -> Tensor:
    n = patches.shape[1]
    if patches.shape[-1] != proj.weight.shape[0]:
        raise DimensionError(
            f"patch length {patches.shape[-1]} != projection input {proj.weight.shape[0]}")
    if n != pos.table.shape[0]:
        raise DimensionError(f"{n} patches but {pos.table.shape[0]} position embeddings")
    return proj(patches) + pos(np.arange(n))


class ResidualBlock(Module):
    """out = x + BN(conv(ReLU(BN(conv(x)))))"""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1, bias=False)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1, bias=False)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ConfigError(f"residual block built for {self.channels} channels, got {x.shape[1]}")
        h = T.relu(self.bn1(self.conv1(x)))
        return x + self.bn2(self.conv2(h))


class UpsampleBlock(Module):
    """ConvTranspose(k=4, s=2, p=1) -> BN -> LeakyReLU; doubles h and w."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.in_ch = in_ch
        self.deconv = ConvTranspose2d(in_ch, out_ch, 4, rng, stride=2, padding=1, bias=False)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise ConfigError(f"upsample block built for {self.in_ch} channels, got {x.shape[1]}")
        return T.leaky_relu(self.bn(self.deconv(x)), LEAKY_SLOPE)


class ViTGenerator(Module):
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        self.cfg = cfg
        att = AttentionConfig(cfg.embed_dim, cfg.num_heads)
        self.embed = PatchEmbedding(cfg.patch_dim, cfg.num_patches, cfg.embed_dim, rng)
        self.encoders = [TransformerEncoderLayer(att, rng, cfg.mlp_ratio, cfg.activation)
                         for _ in range(cfg.num_layers)]
        self.norm = LayerNorm(cfg.embed_dim)
        self.bridge = Conv2d(cfg.embed_dim, cfg.residual_channels, 1, rng)
        self.res_blocks = [ResidualBlock(cfg.residual_channels, rng)
                           for _ in range(cfg.num_residual_blocks)]
        ch = cfg.residual_channels
        ups = []
        for _ in range(cfg.num_upsamples):
            ups.append(UpsampleBlock(ch, ch // 2, rng))
            ch //= 2
        self.upsamples = ups
        self.head = Conv2d(ch, cfg.out_channels, 3, rng, padding=1)

    def forward(self, img: Tensor) -> Tensor:
        return generator_forward(self, img)


def tokens_to_grid(tokens: Tensor) -> Tensor:
    """(b, n, d) -> (b, d, sqrt(n), sqrt(n))"""
    b, n, d = tokens.shape
    g = math.isqrt(n)
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (b, d, g, g))


def generator_forward(g: ViTGenerator, img: Tensor) -> Tensor:
    cfg = g.cfg
    if img.ndim != 4 or img.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"generator expects (b, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), "
            f"got {img.shape}")
    x = g.embed(extract_patches(img, cfg.patch_size))
    for layer in g.encoders:
        x = layer(x)
    x = g.bridge(tokens_to_grid(g.norm(x)))
    for block in g.res_blocks:
        x = block(x)
    for up in g.upsamples:
        x = up(x)
    return T.tanh(g.head(x))


class IdentityGenerator(Module):
    """Returns its input unchanged; has no parameters."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg

    def forward(self, img: Tensor) -> Tensor:
        cfg = self.cfg
        if img.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"generator expects (b, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), "
                f"got {img.shape}")
        return img


def build_generator(cfg: GeneratorConfig, seed: int | Sequence[int] = 0) -> Module:
    rng = np.random.default_rng(seed)
    if cfg.kind == "identity":
        return IdentityGenerator(cfg)
    return ViTGenerator(cfg, rng)
