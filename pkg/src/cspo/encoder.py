"""Temporal encoder mapping a ``[t, k, d']`` market window to ``[k, d]`` asset embeddings."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
from torch import nn

from .data import MarketSeries
from .errors import ConfigError, ShapeMismatch
from .layers import FeedForward, MCDropout, MultiHeadSelfAttention, sinusoidal_encoding


class Provenance(str, enum.Enum):
    S_STAR = "S*"
    C_STAR = "C*"
    E_STAR = "E*"
    S_BAR_C = "S_bar_c"
    S_BAR_E = "S_bar_e"
    S_PLUS = "S+"


@dataclass(frozen=True)
class AssetEmbeddings:
    values: torch.Tensor
    provenance: Provenance

    def __post_init__(self):
        if not torch.isfinite(self.values).all():
            raise ValueError("embeddings contain non-finite entries")


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.d < 1 or self.n_layers < 1 or self.n_heads < 1:
            raise ConfigError("encoder sizes must be positive")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")


class PreNormBlock(nn.Module):
    def __init__(self, d, n_heads, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, n_heads)
        self.drop1 = MCDropout(dropout)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, 4 * d)
        self.drop2 = MCDropout(dropout)

    def forward(self, x):
        x = x + self.drop1(self.attn(self.norm1(x)))
        return x + self.drop2(self.ffn(self.norm2(x)))


class TSEncoder(nn.Module):
    """Per-asset temporal transformer; weights are shared across assets.

    Input ``[..., t, k, d']``, output ``[..., k, d]`` taken from the last time step.
    Attention never mixes assets, so the encoder is exactly asset-permutation
    equivariant.
    """

    def __init__(self, n_features: int, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        self.n_features = n_features
        self.input_proj = nn.Linear(n_features, config.d)
        self.blocks = nn.ModuleList(
            PreNormBlock(config.d, config.n_heads, config.dropout_rate) for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(config.d)

    def embed_inputs(self, x):
        """Projected inputs plus positional encoding, laid out ``[..., k, t, d]``."""
        if x.shape[-1] != self.n_features:
            raise ShapeMismatch(f"expected {self.n_features} features, got {x.shape[-1]}")
        h = self.input_proj(x.transpose(-3, -2))
        return h + sinusoidal_encoding(h.shape[-2], self.config.d, h.dtype)

    def forward(self, x):
        if x.dim() < 3:
            raise ShapeMismatch("encoder input must be [..., t, k, d']")
        h = self.embed_inputs(x)
        for block in self.blocks:
            h = block(h)
        return self.final_norm(h[..., -1, :])


def series_tensor(series: MarketSeries, dtype=torch.float32) -> torch.Tensor:
    return torch.tensor(series.values, dtype=dtype)


def encode(series: MarketSeries, encoder: TSEncoder, provenance=Provenance.S_STAR) -> AssetEmbeddings:
    if series.t < 1:
        raise ShapeMismatch("cannot encode an empty series")
    dtype = next(encoder.parameters()).dtype
    return AssetEmbeddings(encoder(series_tensor(series, dtype)), Provenance(provenance))
