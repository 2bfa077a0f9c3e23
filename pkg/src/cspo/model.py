"""The composed forecaster: three encoders, the bi-level transformer and the PV ensemble."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from . import checkpoint
from .bdp import SCALINGS, BdpConfig, BDPFormer
from .data import MarketBundle
from .encoder import EncoderConfig, TSEncoder
from .errors import ConfigConflict, ConfigError, DataError
from .layers import DropoutStream, set_dropout_stream, set_mc_dropout
from .objective import LossKind
from .volatility import PseudoVolatility, PvConfig, PVEstimator, member_seeds

ABLATIONS = frozenset({"no_futures", "no_bdp", "no_pv"})
MARKETS = ("stock", "commodity", "financial")


@dataclass(frozen=True)
class ModelConfig:
    """Flat model hyper-parameters, desk scale by default."""

    d: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    enc_dropout: float = 0.1
    cme_layers: int = 2
    pmf_layers: int = 2
    bdp_heads: int = 4
    d_ff: int | None = None
    attention_scaling: str = "standard"
    bdp_dropout: float = 0.0
    pv_members: int = 2
    pv_layers: int = 2
    pv_heads: int = 4
    pv_dropout: float = 0.1
    mc_samples_at_inference: int = 1

    def __post_init__(self):
        if self.attention_scaling not in SCALINGS:
            raise ConfigError(f"attention_scaling must be one of {SCALINGS}")
        # constructing the sub-configs runs their own checks
        self.encoder(), self.bdp(), self.pv()

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(d=512, cme_layers=8, pmf_layers=8, bdp_heads=8, enc_heads=8, pv_layers=8, pv_heads=8)

    @classmethod
    def tiny(cls, d: int = 8) -> "ModelConfig":
        """One layer everywhere, no dropout: the gradient-check instance."""
        return cls(
            d=d, enc_layers=1, enc_heads=2, enc_dropout=0.0, cme_layers=1, pmf_layers=1, bdp_heads=2,
            pv_layers=1, pv_heads=2, pv_dropout=0.0,
        )

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.d, self.enc_layers, self.enc_heads, self.enc_dropout)

    def bdp(self) -> BdpConfig:
        return BdpConfig(
            self.cme_layers, self.pmf_layers, self.bdp_heads, self.d_ff, self.attention_scaling, self.bdp_dropout
        )

    def pv(self) -> PvConfig:
        return PvConfig(
            self.pv_members, self.pv_dropout, self.pv_layers, self.mc_samples_at_inference, self.d, self.pv_heads
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in names})


def check_ablation(flags) -> frozenset:
    flags = frozenset(flags or ())
    unknown = flags - ABLATIONS
    if unknown:
        raise ConfigError(f"unknown ablation flags {sorted(unknown)}; known: {sorted(ABLATIONS)}")
    return flags


class ForwardOutput(NamedTuple):
    r_hat: torch.Tensor
    gammas: list[PseudoVolatility]
    intermediates: dict


class MLPFallback(nn.Module):
    """Stand-in for the bi-level stack: stock plus pooled futures embeddings, then a two-layer MLP."""

    def __init__(self, d: int):
        super().__init__()
        self.lin1 = nn.Linear(d, d)
        self.lin2 = nn.Linear(d, d)
        self.head = nn.Linear(d, 1)

    def forward(self, s_star, c_star, e_star, use_futures=True):
        h = s_star
        if use_futures:
            h = h + c_star.mean(dim=-2, keepdim=True) + e_star.mean(dim=-2, keepdim=True)
        h = self.lin2(torch.relu(self.lin1(h)))
        return self.head(h).squeeze(-1), {"S*": s_star, "S_final": h}


class CSPOModel(nn.Module):
    """Raw ``[..., t, k, d']`` windows for the three markets -> returns forecast and PV samples.

    Inputs are z-scored inside the model with per-feature statistics stored
    as buffers, so a checkpoint is self-contained.
    """

    def __init__(self, n_features: dict, config: ModelConfig = ModelConfig(), ablation=frozenset()):
        super().__init__()
        self.config = config
        self.ablation = check_ablation(ablation)
        self.n_features = {m: int(n_features[m]) for m in MARKETS}
        enc_cfg = config.encoder()
        self.encoders = nn.ModuleDict({m: TSEncoder(self.n_features[m], enc_cfg) for m in MARKETS})
        if "no_bdp" in self.ablation:
            self.core = MLPFallback(config.d)
        else:
            self.core = BDPFormer(config.d, config.bdp())
        if "no_pv" in self.ablation:
            self.pv_members = nn.ModuleList()
        else:
            pv_cfg = config.pv()
            self.pv_members = nn.ModuleList(PVEstimator(self.n_features["stock"], pv_cfg) for _ in range(pv_cfg.H))
        for m in MARKETS:
            self.register_buffer(f"mean_{m}", torch.zeros(self.n_features[m]))
            self.register_buffer(f"std_{m}", torch.ones(self.n_features[m]))

    @property
    def use_futures(self) -> bool:
        return "no_futures" not in self.ablation

    def fit_standardizer(self, data: MarketBundle) -> None:
        for m in MARKETS:
            values = getattr(data, m).values
            flat = values.reshape(-1, values.shape[-1])
            mean = flat.mean(axis=0)
            std = flat.std(axis=0)
            std[std < 1e-12] = 1.0
            getattr(self, f"mean_{m}").copy_(torch.as_tensor(mean))
            getattr(self, f"std_{m}").copy_(torch.as_tensor(std))

    def standardize(self, market: str, x):
        return (x - getattr(self, f"mean_{market}")) / getattr(self, f"std_{market}")

    def seed_dropout(self, seed: int) -> None:
        seeds = member_seeds(seed, 1 + len(self.pv_members))
        set_dropout_stream(self.encoders, DropoutStream(seeds[0]))
        set_dropout_stream(self.core, DropoutStream(seeds[0] + 1))
        for member, s in zip(self.pv_members, seeds[1:]):
            set_dropout_stream(member, DropoutStream(s))

    def forward(self, stock, commodity=None, financial=None, with_gamma=True) -> ForwardOutput:
        s = self.standardize("stock", stock)
        s_star = self.encoders["stock"](s)
        c_star = e_star = None
        if self.use_futures:
            if commodity is None or financial is None:
                raise DataError("futures inputs are required unless the no_futures ablation is active")
            c_star = self.encoders["commodity"](self.standardize("commodity", commodity))
            e_star = self.encoders["financial"](self.standardize("financial", financial))
        r_hat, inter = self.core(s_star, c_star, e_star, use_futures=self.use_futures)
        inter["C*"], inter["E*"] = c_star, e_star
        gammas = []
        if with_gamma:
            gammas = [member(s, h + 1) for h, member in enumerate(self.pv_members)]
        return ForwardOutput(r_hat, gammas, inter)

    def mc_gamma(self, stock, n_samples: int) -> torch.Tensor:
        """Mean pseudo-volatility over ``n_samples`` dropout-on passes per member."""
        s = self.standardize("stock", stock)
        draws = []
        for member in self.pv_members:
            set_mc_dropout(member, n_samples > 1)
            try:
                draws.extend(member(s).gamma for _ in range(n_samples))
            finally:
                set_mc_dropout(member, False)
        return torch.stack(draws).mean(dim=0)

    # checkpointing -------------------------------------------------------
    def meta(self) -> dict:
        return {
            "model_config": self.config.to_dict(),
            "ablation": sorted(self.ablation),
            "n_features": self.n_features,
        }

    def save(self, path, extra_meta: dict | None = None) -> str:
        meta = self.meta()
        meta.update(extra_meta or {})
        return checkpoint.save_archive(path, dict(self.state_dict()), meta)

    @classmethod
    def load(cls, path) -> tuple["CSPOModel", dict]:
        tensors, meta = checkpoint.load_archive(path)
        model = cls(meta["n_features"], ModelConfig.from_dict(meta["model_config"]), meta["ablation"])
        model.load_state_dict(tensors)
        return model, meta


def build_model(data: MarketBundle, config: ModelConfig, ablation=frozenset()) -> CSPOModel:
    n_features = {m: getattr(data, m).n_features for m in MARKETS}
    model = CSPOModel(n_features, config, ablation)
    model.fit_standardizer(data)
    return model


def ensure_consistent(ablation, loss_kind) -> None:
    if "no_pv" in ablation and LossKind(loss_kind) is not LossKind.MSE:
        raise ConfigConflict(f"ablation no_pv removes pseudo-volatility but loss_kind={loss_kind} needs it")
