"""Conditional patch discriminators emitting an N x N grid of real/fake logits."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .generator import PatchEmbedding, extract_patches, tokens_to_grid
from .nn import (LEAKY_SLOPE, AttentionConfig, BatchNorm2d, Conv2d, LayerNorm, Module,
                 TransformerEncoderLayer)
from .tensor import ConfigError, DimensionError, Tensor

KERNEL = 4


@dataclass(frozen=True)
class DiscriminatorConfig:
    variant: str = "conv_patchgan"
    condition_channels: int = 3
    image_channels: int = 3
    base_channels: int = 64
    num_downsamples: int = 3
    # transformer variant
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.variant not in ("conv_patchgan", "transformer_patchgan"):
            raise ConfigError(
                f"discriminator.variant must be conv_patchgan or transformer_patchgan, "
                f"got {self.variant!r}")
        for name in ("condition_channels", "image_channels", "base_channels",
                     "num_downsamples", "patch_size", "embed_dim", "num_layers",
                     "num_heads", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"discriminator.{name} must be positive")
        if self.variant == "transformer_patchgan":
            AttentionConfig(self.embed_dim, self.num_heads)

    @property
    def in_channels(self) -> int:
        return self.condition_channels + self.image_channels


def layer_channels(cfg: DiscriminatorConfig) -> list[int]:
    """Widths of the feature convs: c, 2c, 4c, 8c, ... capped at 8c."""
    c = cfg.base_channels
    return [c * min(2 ** i, 8) for i in range(cfg.num_downsamples + 1)]


def patch_grid_size(cfg: DiscriminatorConfig, image_size: int) -> int:
    """Side N of the logit map, from the layer size arithmetic.

    Conv variant: each stride-2 (k=4, p=1) conv maps s -> s/2 (s even) and
    each of the two trailing stride-1 (k=4, p=1) convs maps s -> s - 1.
    Transformer variant: one logit per patch.
    """
    if cfg.variant == "transformer_patchgan":
        if image_size % cfg.patch_size:
            raise ConfigError(
                f"image size {image_size} is not divisible by discriminator patch size "
                f"{cfg.patch_size}")
        return image_size // cfg.patch_size
    s = image_size
    for _ in range(cfg.num_downsamples):
        if s % 2:
            raise ConfigError(
                f"image size {image_size} does not halve evenly {cfg.num_downsamples} times")
        s //= 2
    n = s - 2
    if n < 1:
        raise ConfigError(
            f"image size {image_size} with {cfg.num_downsamples} downsamples leaves no patch grid")
    return n


def receptive_field(cfg: DiscriminatorConfig) -> int:
    """Receptive field side, in input pixels, of one conv-variant output cell."""
    strides = [2] * cfg.num_downsamples + [1, 1]
    rf, jump = 1, 1
    for s in strides:
        rf += (KERNEL - 1) * jump
        jump *= s
    return rf


def cell_input_window(cfg: DiscriminatorConfig, i: int, j: int) -> tuple[int, int, int, int]:
    """Half-open input rows/cols ``(r0, r1, c0, c1)`` that can influence cell (i, j)."""
    strides = [2] * cfg.num_downsamples + [1, 1]
    jump, start = 1, 0
    for s in strides:
        start -= 1 * jump  # padding of 1 at every layer
        jump *= s
    # jump is the total stride; start the input coordinate of cell 0's window
    rf = receptive_field(cfg)
    r0, c0 = start + i * jump, start + j * jump
    return r0, r0 + rf, c0, c0 + rf


class PatchGANDiscriminator(Module):
    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans = layer_channels(cfg)
        convs, norms = [], []
        prev = cfg.in_channels
        for i, ch in enumerate(chans):
            stride = 2 if i < cfg.num_downsamples else 1
            convs.append(Conv2d(prev, ch, KERNEL, rng, stride=stride, padding=1, bias=(i == 0)))
            if i > 0:
                norms.append(BatchNorm2d(ch))
            prev = ch
        self.convs = convs
        self.norms = norms
        self.classifier = Conv2d(prev, 1, KERNEL, rng, stride=1, padding=1)

    def forward(self, condition: Tensor, candidate: Tensor) -> Tensor:
        return discriminate(self, condition, candidate)


class TransformerDiscriminator(Module):
    """Patch tokens -> encoders -> token grid -> 1x1 conv classifier."""

    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator, image_size: int):
        self.cfg = cfg
        grid = patch_grid_size(cfg, image_size)
        att = AttentionConfig(cfg.embed_dim, cfg.num_heads)
        self.embed = PatchEmbedding(cfg.in_channels * cfg.patch_size ** 2, grid * grid,
                                    cfg.embed_dim, rng)
        self.encoders = [TransformerEncoderLayer(att, rng, cfg.mlp_ratio)
                         for _ in range(cfg.num_layers)]
        self.norm = LayerNorm(cfg.embed_dim)
        self.classifier = Conv2d(cfg.embed_dim, 1, 1, rng)

    def forward(self, condition: Tensor, candidate: Tensor) -> Tensor:
        return transformer_discriminate(self, condition, candidate)


def _join(d: Module, condition: Tensor, candidate: Tensor) -> Tensor:
    cfg = d.cfg
    if condition.ndim != 4 or candidate.ndim != 4:
        raise DimensionError(f"expected 4-d inputs, got {condition.shape} and {candidate.shape}")
    if condition.shape[0] != candidate.shape[0] or condition.shape[2:] != candidate.shape[2:]:
        raise DimensionError(
            f"condition {condition.shape} and candidate {candidate.shape} differ in "
            f"batch or spatial size")
    if condition.shape[1] != cfg.condition_channels or candidate.shape[1] != cfg.image_channels:
        raise DimensionError(
            f"expected {cfg.condition_channels}+{cfg.image_channels} channels, got "
            f"{condition.shape[1]}+{candidate.shape[1]}")
    return T.concat([condition, candidate], axis=1)


def discriminate(d: PatchGANDiscriminator, condition: Tensor, candidate: Tensor) -> Tensor:
    """Logit map (b, 1, N, N) for the candidate given the condition image."""
    x = _join(d, condition, candidate)
    for i, conv in enumerate(d.convs):
        x = conv(x)
        if i > 0:
            x = d.norms[i - 1](x)
        x = T.leaky_relu(x, LEAKY_SLOPE)
    return d.classifier(x)


def transformer_discriminate(d: TransformerDiscriminator, condition: Tensor,
                             candidate: Tensor) -> Tensor:
    x = _join(d, condition, candidate)
    tokens = d.embed(extract_patches(x, d.cfg.patch_size))
    for layer in d.encoders:
        tokens = layer(tokens)
    return d.classifier(tokens_to_grid(d.norm(tokens)))


def build_discriminator(cfg: DiscriminatorConfig, image_size: int, seed: int | Sequence[int] = 1) -> Module:
    patch_grid_size(cfg, image_size)
    rng = np.random.default_rng(seed)
    if cfg.variant == "transformer_patchgan":
        return TransformerDiscriminator(cfg, rng, image_size)
    return PatchGANDiscriminator(cfg, rng)
