"""Bi-level dense pricing transformer.

Level one (CME layers) lets stock embeddings query futures embeddings; level
two (PMF layers) runs stock-to-stock attention on the fused representation
and a linear head turns it into next-step return forecasts.

Heads here are full width: each head owns its own ``[d, d]`` query, key and
value maps and the ``h`` head outputs are concatenated to ``[k_s, h*d]``
before the ``[h*d, d]`` output map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import torch
from torch import nn

from .encoder import AssetEmbeddings, Provenance
from .errors import ConfigError, ShapeMismatch
from .layers import FeedForward, MCDropout

Scaling = Literal["standard", "paper_literal"]
SCALINGS = ("standard", "paper_literal")


@dataclass(frozen=True)
class BdpConfig:
    n_cme_layers: int = 8
    n_pmf_layers: int = 8
    n_heads: int = 8
    d_ff: int | None = None
    attention_scaling: Scaling = "standard"
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.n_cme_layers, self.n_pmf_layers, self.n_heads) < 1:
            raise ConfigError("layer and head counts must be >= 1")
        if self.attention_scaling not in SCALINGS:
            raise ConfigError(f"attention_scaling must be one of {SCALINGS}")

    def ffn_width(self, d: int) -> int:
        return self.d_ff or 4 * d


def attention_weights(queries, keys, w_q, w_k, mode: Scaling = "standard"):
    """Row-stochastic attention weights ``[..., h, k_q, k_kv]``.

    In ``paper_literal`` mode the softmax is taken over raw logits; the
    ``1/sqrt(d)`` factor is applied afterwards to the attended values.
    """
    d = queries.shape[-1]
    if keys.shape[-1] != d or w_q.shape[-2] != d:
        raise ShapeMismatch(f"width mismatch: queries {queries.shape[-1]}, keys {keys.shape[-1]}, W {w_q.shape[-2]}")
    q = torch.einsum("...sd,hde->...hse", queries, w_q)
    k = torch.einsum("...kd,hde->...hke", keys, w_k)
    logits = q @ k.transpose(-1, -2)
    if mode == "standard":
        logits = logits / math.sqrt(d)
    elif mode != "paper_literal":
        raise ConfigError(f"unknown attention scaling {mode!r}")
    return torch.softmax(logits, dim=-1)


def cross_attention(queries, keys_values, w_q, w_k, w_v, w_o, mode: Scaling = "standard", return_weights=False):
    """Multi-head attention of ``queries [.., k_s, d]`` over ``keys_values [.., k, d]``."""
    d = queries.shape[-1]
    n_heads = w_q.shape[0]
    if w_o.shape != (n_heads * d, d):
        raise ShapeMismatch(f"output map must be [{n_heads * d}, {d}], got {tuple(w_o.shape)}")
    att = attention_weights(queries, keys_values, w_q, w_k, mode)
    v = torch.einsum("...kd,hde->...hke", keys_values, w_v)
    heads = att @ v
    if mode == "paper_literal":
        heads = heads / math.sqrt(d)
    concat = heads.transpose(-2, -3).reshape(*heads.shape[:-3], heads.shape[-2], n_heads * d)
    out = concat @ w_o
    return (out, att) if return_weights else out


class MultiHeadCrossAttention(nn.Module):
    """Learned ``W_Q, W_K, W_V`` (one ``[d, d]`` each per head) and ``W_O [h*d, d]``."""

    def __init__(self, d: int, n_heads: int, mode: Scaling = "standard"):
        super().__init__()
        self.d, self.n_heads, self.mode = d, n_heads, mode
        bound = 1.0 / math.sqrt(d)
        self.w_q = nn.Parameter(torch.empty(n_heads, d, d).uniform_(-bound, bound))
        self.w_k = nn.Parameter(torch.empty(n_heads, d, d).uniform_(-bound, bound))
        self.w_v = nn.Parameter(torch.empty(n_heads, d, d).uniform_(-bound, bound))
        out_bound = 1.0 / math.sqrt(n_heads * d)
        self.w_o = nn.Parameter(torch.empty(n_heads * d, d).uniform_(-out_bound, out_bound))

    def forward(self, queries, keys_values, return_weights=False):
        return cross_attention(
            queries, keys_values, self.w_q, self.w_k, self.w_v, self.w_o, self.mode, return_weights
        )

    def weights(self, queries, keys_values):
        return attention_weights(queries, keys_values, self.w_q, self.w_k, self.mode)


class CMELayer(nn.Module):
    """``LN(S + FFN(MA(S, F)))``; a single norm, no residual around the attention alone."""

    def __init__(self, d: int, config: BdpConfig):
        super().__init__()
        self.attn = MultiHeadCrossAttention(d, config.n_heads, config.attention_scaling)
        self.ffn = FeedForward(d, config.ffn_width(d), config.dropout)
        self.norm = nn.LayerNorm(d)

    def forward(self, stock, futures):
        return self.norm(stock + self.ffn(self.attn(stock, futures)))


class CMEStack(nn.Module):
    def __init__(self, d: int, config: BdpConfig, n_layers: int | None = None):
        super().__init__()
        n = config.n_cme_layers if n_layers is None else n_layers
        if n < 1:
            raise ConfigError("a CME stack needs at least one layer")
        self.layers = nn.ModuleList(CMELayer(d, config) for _ in range(n))

    def forward(self, s_star, futures):
        # futures embeddings feed every layer unchanged
        h = s_star
        for layer in self.layers:
            h = layer(h, futures)
        return h


class PMFLayer(nn.Module):
    """Stock self-attention with two norms: ``S~ = LN(S + MSA(S))``, out ``LN(S~ + FFN(S~))``."""

    def __init__(self, d: int, config: BdpConfig):
        super().__init__()
        self.attn = MultiHeadCrossAttention(d, config.n_heads, config.attention_scaling)
        self.drop = MCDropout(config.dropout)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, config.ffn_width(d), config.dropout)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, s_plus):
        s_tilde = self.norm1(s_plus + self.drop(self.attn(s_plus, s_plus)))
        return self.norm2(s_tilde + self.ffn(s_tilde))


class PredictHead(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.linear = nn.Linear(d, 1)

    def forward(self, s_final):
        return self.linear(s_final).squeeze(-1)


def market_position_encode(s_star, s_bar_c, s_bar_e):
    """``S+ = S* + S_bar_c + S_bar_e``; accepts tensors or :class:`AssetEmbeddings`."""
    raw = [x.values if isinstance(x, AssetEmbeddings) else x for x in (s_star, s_bar_c, s_bar_e)]
    if not (raw[0].shape == raw[1].shape == raw[2].shape):
        raise ShapeMismatch(f"shapes differ: {[tuple(x.shape) for x in raw]}")
    total = raw[0] + raw[1] + raw[2]
    if isinstance(s_star, AssetEmbeddings):
        return AssetEmbeddings(total, Provenance.S_PLUS)
    return total


def predict_head(s_final, w, b):
    """Functional head ``S_final @ w + b``."""
    if s_final.shape[-1] != w.shape[-1]:
        raise ShapeMismatch(f"embedding width {s_final.shape[-1]} != weight length {w.shape[-1]}")
    return s_final @ w + b


class BDPFormer(nn.Module):
    """Two CME stacks (commodity, financial; independent weights), PMF stack, linear head."""

    def __init__(self, d: int, config: BdpConfig = BdpConfig()):
        super().__init__()
        self.config = config
        self.cme_commodity = CMEStack(d, config)
        self.cme_financial = CMEStack(d, config)
        self.pmf = nn.ModuleList(PMFLayer(d, config) for _ in range(config.n_pmf_layers))
        self.head = PredictHead(d)

    def forward(self, s_star, c_star, e_star, use_futures=True):
        out = {"S*": s_star}
        if use_futures:
            out["S_bar_c"] = self.cme_commodity(s_star, c_star)
            out["S_bar_e"] = self.cme_financial(s_star, e_star)
            h = market_position_encode(s_star, out["S_bar_c"], out["S_bar_e"])
        else:
            h = s_star
        out["S+"] = h
        for layer in self.pmf:
            h = layer(h)
        out["S_final"] = h
        return self.head(h), out
