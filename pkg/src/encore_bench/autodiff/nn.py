"""Layers built on the tensor core: linear maps, attention, transformer blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..errors import ShapeMismatch
from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container; attribute order defines parameter naming order."""

    def named_parameters(self, prefix: str = "", _seen: set | None = None) -> Iterator[tuple[str, Tensor]]:
        seen = set() if _seen is None else _seen
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                if id(value) not in seen:
                    seen.add(id(value))
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def param(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        limit = math.sqrt(6.0 / (d_in + d_out))
        self.weight = param(rng.uniform(-limit, limit, size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ShapeMismatch(f"Linear expects last dim {self.d_in}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Stack of Linear layers with ReLU between (not after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def causal_mask(t: int) -> np.ndarray:
    """True where attention is forbidden (keys after the query position)."""
    return np.triu(np.ones((t, t), dtype=bool), k=1)


def scaled_dot_attention(q, k, v, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head softmax(QK^T / sqrt(d_head)) V on projected inputs.

    ``q`` is ``(b, tq, d)``, ``k``/``v`` are ``(b, tk, d)``; ``mask`` is a
    boolean ``(tq, tk)`` array marking forbidden pairs. Heads are
    concatenated back to ``(b, tq, d)``; the output projection is the
    caller's job.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    d = q.shape[-1]
    if d % heads:
        raise ShapeMismatch(f"model dim {d} not divisible by {heads} heads")
    if k.shape != v.shape or k.shape[-1] != d or k.shape[0] != q.shape[0]:
        raise ShapeMismatch(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = T.mul(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(d // heads))
    if mask is not None:
        scores = T.masked_fill(scores, mask, -np.inf)
    return merge_heads(T.matmul(T.softmax(scores, axis=-1), vh))


class MultiHeadAttention(Module):
    def __init__(self, d_query: int, d_kv: int, d_model: int, heads: int, rng: np.random.Generator,
                 d_out: int | None = None):
        if d_model % heads:
            raise ShapeMismatch(f"model dim {d_model} not divisible by {heads} heads")
        self.q = Linear(d_query, d_model, rng)
        # a key bias shifts every score of a query equally, so softmax ignores it
        self.k = Linear(d_kv, d_model, rng, bias=False)
        self.v = Linear(d_kv, d_model, rng)
        self.o = Linear(d_model, d_out or d_model, rng)
        self.heads = heads

    def __call__(self, query, kv, mask=None) -> Tensor:
        return self.o(scaled_dot_attention(self.q(query), self.k(kv), self.v(kv), self.heads, mask))


class CrossAttentionUnit(Module):
    """Query stream attends to a context stream; residual + norm on the query side."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, dim, dim, heads, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, query, context) -> Tensor:
        return self.norm(T.add(query, self.attn(query, context)))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.l1 = Linear(dim, hidden, rng)
        self.l2 = Linear(hidden, dim, rng)

    def __call__(self, x) -> Tensor:
        return self.l2(T.relu(self.l1(x)))


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ff_mult: int = 2):
        self.attn = MultiHeadAttention(dim, dim, dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, rng)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x, mask=None) -> Tensor:
        x = self.norm1(T.add(x, self.attn(x, x, mask)))
        return self.norm2(T.add(x, self.ff(x)))


class DecoderBlock(Module):
    """Masked self-attention, cross-attention to a memory, feed-forward."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ff_mult: int = 2):
        self.self_attn = MultiHeadAttention(dim, dim, dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, dim, dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, rng)
        self.norm3 = LayerNorm(dim)

    def __call__(self, x, memory, causal: bool = True) -> Tensor:
        mask = causal_mask(x.shape[1]) if causal else None
        x = self.norm1(T.add(x, self.self_attn(x, x, mask)))
        x = self.norm2(T.add(x, self.cross_attn(x, memory)))
        return self.norm3(T.add(x, self.ff(x)))


def sinusoidal_positions(t: int, dim: int) -> np.ndarray:
    pos = np.arange(t, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
