"""Layers: linear, conv, transposed conv, norms, embeddings and attention."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ContractError, DimensionError, Tensor

LEAKY_SLOPE = 0.2


class Module:
    """Parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; names listed
    in ``_buffers`` are plain arrays (running statistics) that are saved but
    never differentiated.
    """

    _buffers: tuple[str, ...] = ()
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, val in vars(self).items():
            if isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v
            else:
                yield name, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in self._children():
            if isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for m_prefix, m in _named_modules(self):
            for b in m._buffers:
                params[m_prefix + b] = (m, b)
        missing = sorted(set(params) - set(state))
        unknown = sorted(set(state) - set(params))
        if missing or unknown:
            raise KeyError(f"state mismatch: missing {missing}, unknown {unknown}")
        for name, target in params.items():
            arr = np.asarray(state[name])
            if isinstance(target, Tensor):
                if arr.shape != target.shape:
                    raise DimensionError(f"{name}: expected shape {target.shape}, got {arr.shape}")
                target.data = arr.astype(target.dtype, copy=True)
            else:
                m, b = target
                cur = getattr(m, b)
                if arr.shape != cur.shape:
                    raise DimensionError(f"{name}: expected shape {cur.shape}, got {arr.shape}")
                setattr(m, b, arr.astype(cur.dtype, copy=True))

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for _, m in _named_modules(self):
            for b in m._buffers:
                setattr(m, b, getattr(m, b).astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _named_modules(m: Module, prefix: str = ""):
    yield prefix, m
    for name, val in m._children():
        if isinstance(val, Module):
            yield from _named_modules(val, f"{prefix}{name}.")


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn outside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ------------------------------------------------------------------ layers

class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (in_features, out_features)))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = T.matmul(x, weight)
    return out + bias if bias is not None else out


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel * kernel
        self.weight = parameter(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        self.stride, self.padding = stride, padding
        fan_in = out_ch * kernel * kernel
        self.weight = parameter(kaiming_uniform(rng, (in_ch, out_ch, kernel, kernel), fan_in))
        self.bias = parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.eps, self.momentum = eps, momentum
        self.weight = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def forward(self, x: Tensor) -> Tensor:
        return normalize("batch_norm", x, self, self.training)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.eps = eps
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return normalize("layer_norm", x, self)


def normalize(kind: str, x: Tensor, params, training: bool = True) -> Tensor:
    """Batch norm over (b, h, w) per channel, or layer norm over the last axis.

    ``params`` carries ``weight``, ``bias``, ``eps`` and, for batch norm,
    ``momentum`` plus the running-statistic arrays it updates in training.
    """
    if kind == "layer_norm":
        mu = T.mean(x, -1, keepdims=True)
        xc = x - mu
        var = T.mean(xc * xc, -1, keepdims=True)
        y = xc * T.power(var + params.eps, -0.5)
        return y * params.weight + params.bias
    if kind != "batch_norm":
        raise ValueError(f"unknown norm kind {kind!r}")
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects (b, c, h, w), got {x.shape}")
    c = x.shape[1]
    gamma = T.reshape(params.weight, (1, c, 1, 1))
    beta = T.reshape(params.bias, (1, c, 1, 1))
    if not training:
        mu = params.running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        inv = (1.0 / np.sqrt(params.running_var.reshape(1, c, 1, 1) + params.eps)).astype(x.dtype)
        return (x - mu) * inv * gamma + beta
    if x.shape[0] < 2:
        raise ContractError("batch_norm in training mode needs batch size >= 2")
    axes = (0, 2, 3)
    mu = T.mean(x, axes, keepdims=True)
    xc = x - mu
    var = T.mean(xc * xc, axes, keepdims=True)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    m = params.momentum
    rm, rv = params.running_mean, params.running_var
    params.running_mean = ((1 - m) * rm + m * mu.data.reshape(c)).astype(rm.dtype)
    params.running_var = ((1 - m) * rv + m * var.data.reshape(c) * n / (n - 1)).astype(rv.dtype)
    return xc * T.power(var + params.eps, -0.5) * gamma + beta


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        self.table = parameter(trunc_normal(rng, (num, dim)))

    def forward(self, indices) -> Tensor:
        return T.embedding(self.table, indices)


# --------------------------------------------------------------- attention

@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    num_heads: int

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ConfigError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    d_k = q.shape[-1]
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(d_k))
    weights = T.softmax(scores, -1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    """Self-attention; head ``h`` owns columns ``h*d_k:(h+1)*d_k`` of each projection."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        h, dk = self.cfg.num_heads, self.cfg.head_dim
        return T.transpose(T.reshape(x, (b, t, h, dk)), (0, 2, 1, 3))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.cfg.embed_dim:
            raise DimensionError(f"MHA expects (b, t, {self.cfg.embed_dim}), got {x.shape}")
        b, t, d = x.shape
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(x))
        v = self._split(self.v_proj(x))
        heads, weights = attention(q, k, v, return_weights=True)
        self.last_weights = weights.data
        merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, t, d))
        return self.out_proj(merged)


def multi_head_attention(x: Tensor, params: MultiHeadAttention) -> Tensor:
    return params(x)


class TransformerEncoderLayer(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator,
                 mlp_ratio: int = 4, activation: str = "gelu"):
        if activation not in ("gelu", "relu"):
            raise ConfigError(f"activation must be gelu or relu, got {activation!r}")
        d = cfg.embed_dim
        self.activation = activation
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm2 = LayerNorm(d)
        self.fc1 = Linear(d, mlp_ratio * d, rng)
        self.fc2 = Linear(mlp_ratio * d, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        h = self.fc1(self.norm2(x))
        h = T.gelu(h) if self.activation == "gelu" else T.relu(h)
        return x + self.fc2(h)


def transformer_encoder_layer(x: Tensor, params: TransformerEncoderLayer) -> Tensor:
    return params(x)
