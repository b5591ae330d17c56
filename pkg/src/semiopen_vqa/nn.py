"""Transformer building blocks: linear maps, attention, FFN, encoder/decoder layers.

All blocks use the row-vector convention ``y = x @ W + b`` and accept inputs
with optional leading batch dimensions, i.e. ``(..., rows, D)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor


class Module:
    """Container that discovers Parameters and sub-Modules through attributes."""

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value.name, value
            elif isinstance(value, Module):
                yield from value.named_parameters()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.named_parameters()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grads(self) -> None:
        T.zero_grads(self.parameters())


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, name: str, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float64):
        self.weight = Parameter(glorot(rng, d_in, d_out, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out, dtype=dtype), f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear expects feature dim {self.weight.shape[0]}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, name: str, eps: float = 1e-5, dtype=np.float64):
        self.gain = Parameter(np.ones(dim, dtype=dtype), f"{name}.gain")
        self.bias = Parameter(np.zeros(dim, dtype=dtype), f"{name}.bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int

    def __post_init__(self):
        if self.model_dim < 1 or self.num_heads < 1:
            raise ValueError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., n, D) -> (..., H, n, d_k)
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    k = len(lead)
    axes = list(range(k)) + [k + 1, k, k + 2]
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    k = len(lead)
    axes = list(range(k)) + [k + 1, k, k + 2]
    return T.transpose(x, axes).reshape(*lead, n, h * dk)


class MultiHeadAttention(Module):
    """softmax(Q Kᵀ/√d_k) V per head, heads concatenated then projected back to D."""

    def __init__(self, cfg: AttentionConfig, name: str, rng: np.random.Generator, dtype=np.float64):
        d = cfg.model_dim
        self.cfg = cfg
        self.w_q = Linear(d, d, f"{name}.w_q", rng, bias=False, dtype=dtype)
        self.w_k = Linear(d, d, f"{name}.w_k", rng, bias=False, dtype=dtype)
        self.w_v = Linear(d, d, f"{name}.w_v", rng, bias=False, dtype=dtype)
        self.w_o = Linear(d, d, f"{name}.w_o", rng, dtype=dtype)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        return multi_head_attention(query, key, value, self)


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor, attn: MultiHeadAttention) -> Tensor:
    cfg = attn.cfg
    if key.shape[-2] != value.shape[-2]:
        raise ShapeError(f"key rows {key.shape[-2]} != value rows {value.shape[-2]}")
    for label, t in (("query", query), ("key", key), ("value", value)):
        if t.shape[-1] != cfg.model_dim:
            raise ShapeError(f"{label} feature dim {t.shape[-1]} != model dim {cfg.model_dim}")
    h = cfg.num_heads
    q = _split_heads(attn.w_q(query), h)
    k = _split_heads(attn.w_k(key), h)
    v = _split_heads(attn.w_v(value), h)
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / np.sqrt(cfg.head_dim))
    weights = T.softmax_rows(scores)
    return attn.w_o(_merge_heads(T.matmul(weights, v)))


class FeedForward(Module):
    def __init__(self, dim: int, hidden_mult: int, name: str, rng: np.random.Generator,
                 activation: str = "gelu", dtype=np.float64):
        if hidden_mult < 1:
            raise ValueError("hidden_mult must be >= 1")
        self.lin1 = Linear(dim, hidden_mult * dim, f"{name}.lin1", rng, dtype=dtype)
        self.lin2 = Linear(hidden_mult * dim, dim, f"{name}.lin2", rng, dtype=dtype)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.activation(self.lin1(x), self.activation))


def feed_forward(x: Tensor, ffn: FeedForward) -> Tensor:
    return ffn(x)


class EncoderLayer(Module):
    """Pre-norm self-attention + FFN block with residuals.

    With ``plain=True`` the residuals and norms are dropped, leaving
    ``FFN(MSA(x, x, x))``.
    """

    def __init__(self, dim: int, heads: int, hidden_mult: int, name: str, rng: np.random.Generator,
                 activation: str = "gelu", plain: bool = False, dtype=np.float64):
        self.dim = dim
        self.plain = plain
        self.attn = MultiHeadAttention(AttentionConfig(dim, heads), f"{name}.attn", rng, dtype)
        self.ffn = FeedForward(dim, hidden_mult, f"{name}.ffn", rng, activation, dtype)
        self.norm1 = LayerNorm(dim, f"{name}.norm1", dtype=dtype)
        self.norm2 = LayerNorm(dim, f"{name}.norm2", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"encoder layer expects dim {self.dim}, got {x.shape}")
        if self.plain:
            return self.ffn(self.attn(x, x, x))
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        return x + self.ffn(self.norm2(x))


def encoder_layer_forward(x: Tensor, layer: EncoderLayer) -> Tensor:
    return layer(x)


class DecoderLayer(Module):
    """Self-attention over the queries, cross-attention into memory, then FFN."""

    def __init__(self, dim: int, heads: int, hidden_mult: int, name: str, rng: np.random.Generator,
                 activation: str = "gelu", plain: bool = False, dtype=np.float64):
        self.dim = dim
        self.plain = plain
        cfg = AttentionConfig(dim, heads)
        self.self_attn = MultiHeadAttention(cfg, f"{name}.self_attn", rng, dtype)
        self.cross_attn = MultiHeadAttention(cfg, f"{name}.cross_attn", rng, dtype)
        self.ffn = FeedForward(dim, hidden_mult, f"{name}.ffn", rng, activation, dtype)
        self.norm1 = LayerNorm(dim, f"{name}.norm1", dtype=dtype)
        self.norm2 = LayerNorm(dim, f"{name}.norm2", dtype=dtype)
        self.norm3 = LayerNorm(dim, f"{name}.norm3", dtype=dtype)

    def __call__(self, a: Tensor, memory: Tensor) -> Tensor:
        if a.shape[-1] != self.dim or memory.shape[-1] != self.dim:
            raise ShapeError(f"decoder layer expects dim {self.dim}, got {a.shape} and {memory.shape}")
        if self.plain:
            a = self.self_attn(a, a, a)
            a = self.cross_attn(a, memory, memory)
            return self.ffn(a)
        h = self.norm1(a)
        a = a + self.self_attn(h, h, h)
        a = a + self.cross_attn(self.norm2(a), memory, memory)
        return a + self.ffn(self.norm3(a))


def decoder_layer_forward(a: Tensor, memory: Tensor, layer: DecoderLayer) -> Tensor:
    return layer(a, memory)
