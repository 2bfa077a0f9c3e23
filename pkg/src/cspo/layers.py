"""Shared torch building blocks: seeded dropout, temporal attention, positional encoding."""
from __future__ import annotations

import math

import torch
from torch import nn


class DropoutStream:
    """Source of dropout keep-masks drawn from an explicit ``torch.Generator``.

    With ``record=True`` every mask is appended to :attr:`masks` so that a
    later :class:`ReplayStream` can feed back exactly the same sequence.
    """

    def __init__(self, seed: int = 0, record: bool = False):
        self.generator = torch.Generator().manual_seed(int(seed))
        self.record = record
        self.masks: list[torch.Tensor] = []

    def keep_mask(self, shape, keep_prob: float, dtype) -> torch.Tensor:
        mask = (torch.rand(shape, generator=self.generator) < keep_prob).to(dtype)
        if self.record:
            self.masks.append(mask.clone())
        return mask


class ReplayStream:
    def __init__(self, masks):
        self._masks = list(masks)
        self._pos = 0

    def keep_mask(self, shape, keep_prob, dtype):
        mask = self._masks[self._pos]
        self._pos += 1
        if tuple(mask.shape) != tuple(shape):
            raise RuntimeError(f"replayed mask shape {tuple(mask.shape)} != requested {tuple(shape)}")
        return mask.to(dtype)


class MCDropout(nn.Module):
    """Inverted dropout whose masks come from a :class:`DropoutStream`.

    Active in training mode, or in any mode while ``always_on`` is set (the
    Monte Carlo sampling switch).
    """

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.p = float(p)
        self.always_on = False
        self.stream: DropoutStream | ReplayStream | None = None

    def forward(self, x):
        if self.p == 0.0 or not (self.training or self.always_on):
            return x
        if self.stream is None:
            self.stream = DropoutStream(0)
        keep = 1.0 - self.p
        return x * self.stream.keep_mask(x.shape, keep, x.dtype) / keep

    def extra_repr(self):
        return f"p={self.p}"


def set_dropout_stream(module: nn.Module, stream) -> None:
    for m in module.modules():
        if isinstance(m, MCDropout):
            m.stream = stream


def set_mc_dropout(module: nn.Module, on: bool) -> None:
    for m in module.modules():
        if isinstance(m, MCDropout):
            m.always_on = bool(on)


def sinusoidal_encoding(length: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(length, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


class MultiHeadSelfAttention(nn.Module):
    """Standard scaled dot-product self-attention over the second-to-last axis.

    The model width is split evenly across heads.
    """

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.d, self.n_heads = d, n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def weights(self, x):
        q, k, _ = self._split(x)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d // self.n_heads), dim=-1)

    def _split(self, x):
        *lead, n, _ = x.shape
        qkv = self.qkv(x).reshape(*lead, n, 3, self.n_heads, self.d // self.n_heads)
        q, k, v = qkv.unbind(-3)
        return q.transpose(-2, -3), k.transpose(-2, -3), v.transpose(-2, -3)

    def forward(self, x):
        q, k, v = self._split(x)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d // self.n_heads), dim=-1)
        out = (att @ v).transpose(-2, -3)
        return self.out(out.reshape(*out.shape[:-2], self.d))


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.lin1 = nn.Linear(d, d_ff)
        self.lin2 = nn.Linear(d_ff, d)
        self.drop = MCDropout(dropout)

    def forward(self, x):
        return self.lin2(self.drop(torch.relu(self.lin1(x))))
