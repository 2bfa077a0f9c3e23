"""Pseudo-volatility estimation with Monte Carlo dropout and independent ensemble members."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeMismatch
from .layers import (
    DropoutStream,
    FeedForward,
    MCDropout,
    MultiHeadSelfAttention,
    set_dropout_stream,
    set_mc_dropout,
    sinusoidal_encoding,
)


@dataclass(frozen=True)
class PvConfig:
    H: int = 2
    dropout_rate: float = 0.1
    n_trm_layers: int = 8
    mc_samples_at_inference: int = 1
    d: int = 64
    n_heads: int = 4

    def __post_init__(self):
        if self.H < 1:
            raise ConfigError("ensemble size H must be >= 1")
        if self.n_trm_layers < 1 or self.mc_samples_at_inference < 1:
            raise ConfigError("n_trm_layers and mc_samples_at_inference must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.d % self.n_heads:
            raise ConfigError("d must be divisible by n_heads")


@dataclass(frozen=True)
class PseudoVolatility:
    gamma: torch.Tensor  # [..., k_s]
    gamma_raw: torch.Tensor  # [..., k_s, d]
    member_index: int = 1


class VanillaLayer(nn.Module):
    """Post-norm transformer layer with dropout after each sublayer."""

    def __init__(self, d, n_heads, dropout):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d, n_heads)
        self.drop1 = MCDropout(dropout)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, 4 * d)
        self.drop2 = MCDropout(dropout)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x):
        x = self.norm1(x + self.drop1(self.attn(x)))
        return self.norm2(x + self.drop2(self.ffn(x)))


class PVEstimator(nn.Module):
    """``[..., t, k_s, d']`` raw stock window -> per-stock pseudo-volatility.

    MLP (two layers, ReLU) then temporal transformer layers per stock, mean
    pooled over time to ``gamma_raw [k_s, d]`` and projected to ``gamma [k_s]``.
    """

    def __init__(self, n_features: int, config: PvConfig = PvConfig()):
        super().__init__()
        self.config = config
        self.n_features = n_features
        d = config.d
        self.mlp_in = nn.Linear(n_features, d)
        self.mlp_drop = MCDropout(config.dropout_rate)
        self.mlp_out = nn.Linear(d, d)
        self.layers = nn.ModuleList(
            VanillaLayer(d, config.n_heads, config.dropout_rate) for _ in range(config.n_trm_layers)
        )
        self.gamma_proj = nn.Linear(d, 1)
        nn.init.zeros_(self.gamma_proj.bias)

    def mlp(self, x):
        return self.mlp_out(self.mlp_drop(torch.relu(self.mlp_in(x))))

    def transform(self, v):
        """Temporal layers on ``[..., t, k, d]``; returns the same layout."""
        h = v.transpose(-3, -2)
        h = h + sinusoidal_encoding(h.shape[-2], self.config.d, h.dtype)
        for layer in self.layers:
            h = layer(h)
        return h.transpose(-3, -2)

    def pool(self, v_tilde):
        return v_tilde.mean(dim=-3)

    def forward(self, x, member_index: int = 1) -> PseudoVolatility:
        if x.dim() < 3 or x.shape[-1] != self.n_features:
            raise ShapeMismatch(f"expected [..., t, k_s, {self.n_features}], got {tuple(x.shape)}")
        gamma_raw = self.pool(self.transform(self.mlp(x)))
        gamma = self.gamma_proj(gamma_raw).squeeze(-1)
        return PseudoVolatility(gamma, gamma_raw, member_index)


def pv_forward(stock, estimator: PVEstimator, rng=None, member_index: int = 1) -> PseudoVolatility:
    """One stochastic pass with dropout forced on, masks drawn from ``rng``.

    ``rng`` may be an int seed, a :class:`DropoutStream` or a replay stream.
    """
    if isinstance(stock, np.ndarray):
        stock = torch.tensor(stock, dtype=next(estimator.parameters()).dtype)
    elif hasattr(stock, "values") and not torch.is_tensor(stock):
        stock = torch.tensor(stock.values, dtype=next(estimator.parameters()).dtype)
    stream = DropoutStream(rng) if rng is None or isinstance(rng, (int, np.integer)) else rng
    set_dropout_stream(estimator, stream)
    set_mc_dropout(estimator, True)
    try:
        return estimator(stock, member_index)
    finally:
        set_mc_dropout(estimator, False)


def member_seeds(seed: int, n: int) -> list[int]:
    """Disjoint, reproducible child seeds for ``n`` members."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def ensemble_estimate(stock, members, seed: int = 0) -> list[PseudoVolatility]:
    if len(members) < 1:
        raise ConfigError("ensemble needs at least one member")
    seeds = member_seeds(seed, len(members))
    return [pv_forward(stock, m, DropoutStream(s), member_index=h + 1) for h, (m, s) in enumerate(zip(members, seeds))]
