"""Parameter containers and transformer building blocks."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .. import tensor as T
from ..tensor import Tensor

NEG_INF = -1e9


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.data.shape != tuple(arr.shape):
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.data.shape}")
            p.data = np.array(arr, dtype=np.float64)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, math.sqrt(2.0 / (d_in + d_out)), (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return x @ self.weight + self.bias
        lead = x.shape[:-1]
        y = x.reshape(-1, x.shape[-1]) @ self.weight + self.bias
        return y.reshape(*lead, y.shape[-1])


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def key_padding_mask(lengths: np.ndarray, max_len: int) -> np.ndarray:
    """Additive mask of shape (B, 1, 1, L) hiding keys past each length."""
    valid = np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), NEG_INF), k=1)[None, None]


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray | None = None) -> Tensor:
        b, lq, d = x.shape
        lk = memory.shape[1]
        h = self.heads
        dh = d // h
        q = self.q(x).reshape(b, lq, h, dh).transpose(0, 2, 1, 3)
        k = self.k(memory).reshape(b, lk, h, dh).transpose(0, 2, 3, 1)
        v = self.v(memory).reshape(b, lk, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dh))
        if mask is not None:
            scores = scores + mask
        att = T.softmax(scores, axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, lq, d)
        return self.o(out)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.inner = Linear(dim, hidden, rng)
        self.outer = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor, rate: float = 0.0, rng=None) -> Tensor:
        return self.outer(T.dropout(T.relu(self.inner(x)), rate, rng))


class EncoderBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.ln_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)

    def __call__(self, x: Tensor, mask=None, rate: float = 0.0, rng=None) -> Tensor:
        y = self.ln_attn(x)
        x = x + T.dropout(self.attn(y, y, mask), rate, rng)
        return x + T.dropout(self.ffn(self.ln_ffn(x), rate, rng), rate, rng)


class DecoderBlock(Module):
    """Pre-norm self-attention + cross-attention block; causality set by the caller's mask."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.ln_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.ln_cross = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.ln_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)

    def __call__(self, x: Tensor, memory: Tensor, self_mask=None, memory_mask=None,
                 rate: float = 0.0, rng=None) -> Tensor:
        y = self.ln_self(x)
        x = x + T.dropout(self.self_attn(y, y, self_mask), rate, rng)
        x = x + T.dropout(self.cross_attn(self.ln_cross(x), memory, memory_mask), rate, rng)
        return x + T.dropout(self.ffn(self.ln_ffn(x), rate, rng), rate, rng)
