"""Joint training of encoders, bi-level transformer and PV ensemble."""
from __future__ import annotations

import copy
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch.func import functional_call, vmap

from .data import MarketBundle, PriceSeries, synthesize_market
from .errors import ConfigError, InsufficientHistory, NonFiniteLoss
from .metrics import DailyPanel, ic
from .model import CSPOModel, ModelConfig, build_model, check_ablation, ensure_consistent
from .objective import LossKind, compute_loss

logger = logging.getLogger(__name__)

LEARNING_RATE_GRID = (1e-5, 1e-4, 1e-3)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_days: int = 16
    lookback_t: int = 8
    seed: int = 0
    loss_kind: LossKind = LossKind.CSPO_FINAL
    ablation: frozenset = frozenset()
    grad_clip_norm: float = 5.0
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    shuffle: bool = True

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        object.__setattr__(self, "ablation", check_ablation(self.ablation))
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_days < 1 or self.lookback_t < 1:
            raise ConfigError("batch_days and lookback_t must be >= 1")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        ensure_consistent(self.ablation, self.loss_kind)

    def to_dict(self) -> dict:
        raw = dataclasses.asdict(self)
        raw["loss_kind"] = self.loss_kind.value
        raw["ablation"] = sorted(self.ablation)
        raw["betas"] = list(self.betas)
        return raw

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in names})


@dataclass
class TrainReport:
    loss_trace: list[float]
    val_ic_trace: list[float]
    wall_clock: float
    checkpoint_id: str = ""
    model: CSPOModel | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class Predictions:
    """``r_hat[i]`` is the forecast made on ``dates[i]`` for the move to the next date."""

    dates: tuple[str, ...]
    asset_ids: tuple[str, ...]
    r_hat: np.ndarray
    gamma: np.ndarray | None = None


# ---------------------------------------------------------------------------
# windows

def split_bundle(data: MarketBundle, boundary: str, lookback: int) -> tuple[MarketBundle, MarketBundle]:
    """Training dates before ``boundary``; hold-out slice keeps ``lookback - 1`` dates of context."""
    cut = data.index_of(boundary)
    start = max(0, cut - lookback + 1)
    return slice_bundle(data, 0, cut), slice_bundle(data, start, data.t)


def slice_bundle(data: MarketBundle, start: int, stop: int) -> MarketBundle:
    p = data.prices
    return MarketBundle(
        data.stock.slice_dates(start, stop),
        data.commodity.slice_dates(start, stop),
        data.financial.slice_dates(start, stop),
        PriceSeries(p.prices[start:stop], p.dates[start:stop], p.asset_ids),
    )


class Windows:
    """Look-back windows over a bundle; anchor ``i`` covers dates ``i-L+1 .. i``."""

    def __init__(self, data: MarketBundle, lookback: int, dtype=torch.float32):
        self.data, self.lookback, self.dtype = data, lookback, dtype
        self.arrays = {m: getattr(data, m).values for m in ("stock", "commodity", "financial")}
        p = data.prices.prices
        self.targets = p[1:] / p[:-1] - 1.0

    def anchors(self, need_target=True) -> np.ndarray:
        last = self.data.t - 2 if need_target else self.data.t - 1
        return np.arange(self.lookback - 1, last + 1)

    def inputs(self, anchors):
        idx = np.asarray(anchors)[:, None] + np.arange(-self.lookback + 1, 1)[None, :]
        return tuple(torch.as_tensor(self.arrays[m][idx], dtype=self.dtype) for m in ("stock", "commodity", "financial"))

    def target(self, anchors):
        return torch.as_tensor(self.targets[np.asarray(anchors)], dtype=self.dtype)


def _require_history(data: MarketBundle, lookback: int):
    if data.t < lookback + 1:
        raise InsufficientHistory(f"need at least lookback_t + 1 = {lookback + 1} dates, have {data.t}")


# ---------------------------------------------------------------------------
# training

def _batches(anchors, size):
    for i in range(0, len(anchors), size):
        yield anchors[i : i + size]


def train(
    data: MarketBundle,
    config: TrainConfig = TrainConfig(),
    model_config: ModelConfig = ModelConfig(),
    valid: MarketBundle | None = None,
    checkpoint_path=None,
    extra_meta: dict | None = None,
) -> TrainReport:
    """Fit a fresh model on every anchor of ``data`` whose target lies inside it."""
    _require_history(data, config.lookback_t)
    torch.manual_seed(config.seed)
    model = build_model(data, model_config, config.ablation)
    model.seed_dropout(config.seed)
    windows = Windows(data, config.lookback_t)
    anchors = windows.anchors()
    valid_windows = Windows(valid, config.lookback_t) if valid is not None and valid.t > config.lookback_t else None
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, betas=config.betas, weight_decay=config.weight_decay
    )
    order_rng = np.random.default_rng(config.seed)
    loss_trace, ic_trace = [], []
    last_state = copy.deepcopy(model.state_dict())
    started = time.perf_counter()

    for epoch in range(config.epochs):
        model.train()
        order = order_rng.permutation(anchors) if config.shuffle else anchors
        total, count = 0.0, 0
        for batch in _batches(order, config.batch_days):
            out = model(*windows.inputs(batch))
            loss = compute_loss(config.loss_kind, windows.target(batch), out.r_hat, [g.gamma for g in out.gammas])
            if not torch.isfinite(loss):
                model.load_state_dict(last_state)
                if checkpoint_path is not None:
                    model.save(checkpoint_path, extra_meta)
                exc = NonFiniteLoss(f"non-finite loss in epoch {epoch}", last_state=last_state, epoch=epoch)
                exc.loss_trace, exc.ic_trace = loss_trace, ic_trace
                raise exc
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
            optimizer.step()
            total += loss.item() * len(batch)
            count += len(batch)
        loss_trace.append(total / count)
        ic_trace.append(evaluate_ic(model, valid_windows) if valid_windows is not None else float("nan"))
        last_state = copy.deepcopy(model.state_dict())
        logger.debug("epoch %d loss %.6g val_ic %.4f", epoch, loss_trace[-1], ic_trace[-1])

    model.eval()
    ckpt_id = model.save(checkpoint_path, extra_meta) if checkpoint_path is not None else ""
    return TrainReport(loss_trace, ic_trace, time.perf_counter() - started, ckpt_id, model)


@torch.no_grad()
def predict(model: CSPOModel, data: MarketBundle, lookback: int, need_target=False, emit_volatility=False, chunk=256):
    windows = Windows(data, lookback, dtype=next(model.parameters()).dtype)
    anchors = windows.anchors(need_target=need_target)
    if anchors.size == 0:
        raise InsufficientHistory(f"no full {lookback}-day window in {data.t} dates")
    was_training = model.training
    model.eval()
    try:
        preds, gammas = [], []
        n_mc = model.config.mc_samples_at_inference
        for batch in _batches(anchors, chunk):
            stock, com, fin = windows.inputs(batch)
            preds.append(model(stock, com, fin, with_gamma=False).r_hat.numpy().astype(np.float64))
            if emit_volatility and len(model.pv_members):
                gammas.append(model.mc_gamma(stock, n_mc).numpy().astype(np.float64))
    finally:
        model.train(was_training)
    gamma = np.concatenate(gammas) if gammas else None
    dates = tuple(data.dates[i] for i in anchors)
    return Predictions(dates, data.stock.asset_ids, np.concatenate(preds), gamma)


def evaluate_ic(model: CSPOModel, windows: Windows) -> float:
    preds = predict(model, windows.data, windows.lookback, need_target=True)
    realized = windows.targets[windows.anchors()]
    mean, _ = ic(DailyPanel.from_matrix(preds.r_hat, realized))
    return mean


def holdout_ic(model: CSPOModel, holdout: MarketBundle, lookback: int) -> float:
    return evaluate_ic(model, Windows(holdout, lookback))


# ---------------------------------------------------------------------------
# gradient check

_FD_CHUNK = 256


def tiny_instance(seed: int = 0, k_s=3, k_c=2, k_e=2, t=4, d_prime=4):
    market = synthesize_market(seed, t + 2, k_s, k_c, k_e, d_prime, signal_strength=0.5)
    return MarketBundle(*market)


def gradient_check(
    model_config: ModelConfig | None = None,
    epsilon: float = 1e-6,
    seed: int = 0,
    lookback: int = 4,
    max_entries: int | None = None,
    zero_params: bool = False,
    k_s: int = 3,
    k_c: int = 2,
    k_e: int = 2,
) -> dict[str, float]:
    """Central differences vs autograd on the composed final loss, in float64.

    Returns, per parameter tensor, ``max|g_analytic - g_numeric|`` divided by
    the largest gradient magnitude in that tensor. The divisor is floored at the
    round-off level of a central difference, so tensors whose gradient is pure
    noise (e.g. weights of an all-zero feature) report ~0 rather than 1.
    ``max_entries`` caps how many coordinates are probed per tensor.
    """
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    model_config = model_config or ModelConfig.tiny()
    data = tiny_instance(seed, k_s, k_c, k_e, lookback)
    torch.manual_seed(seed)
    model = build_model(data, model_config).double()
    if zero_params:
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
    model.eval()
    windows = Windows(data, lookback, dtype=torch.float64)
    anchors = windows.anchors()[:1]
    inputs, target = windows.inputs(anchors), windows.target(anchors)

    def loss_fn(params=None):
        out = model(*inputs) if params is None else functional_call(model, params, inputs)
        return compute_loss(LossKind.CSPO_FINAL, target, out.r_hat, [g.gamma for g in out.gammas])

    model.zero_grad()
    base = loss_fn()
    base.backward()
    noise_floor = 1e3 * np.finfo(np.float64).eps * max(1.0, abs(base.item())) / epsilon
    rng = np.random.default_rng(seed)
    frozen = {k: v.detach() for k, v in model.named_parameters()}
    report = {}
    with torch.no_grad():
        for name, param in model.named_parameters():
            analytic = param.grad.detach().clone().reshape(-1) if param.grad is not None else torch.zeros(param.numel(), dtype=param.dtype)
            idx = np.arange(param.numel())
            if max_entries is not None and idx.size > max_entries:
                idx = np.sort(rng.choice(idx, size=max_entries, replace=False))

            def shifted(value):
                return loss_fn({**frozen, name: value})

            # one perturbed copy of the tensor per probed coordinate, evaluated in a single vmap call
            numeric = np.empty(idx.size)
            for lo in range(0, idx.size, _FD_CHUNK):
                chunk = torch.as_tensor(idx[lo:lo + _FD_CHUNK])
                bump = torch.zeros(chunk.numel(), param.numel(), dtype=param.dtype)
                bump[torch.arange(chunk.numel()), chunk] = epsilon
                bump = bump.reshape(chunk.numel(), *param.shape)
                up, down = vmap(shifted)(frozen[name] + bump), vmap(shifted)(frozen[name] - bump)
                numeric[lo:lo + chunk.numel()] = ((up - down) / (2 * epsilon)).numpy()
            a = analytic.numpy()[idx]
            scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), noise_floor)
            err = np.abs(a - numeric).max(initial=0.0)
            if not np.isfinite(err) or not np.all(np.isfinite(a)):
                report[name] = float("nan")
            else:
                report[name] = float(err / scale)
    return report


# ---------------------------------------------------------------------------
# loss comparison

@dataclass(frozen=True)
class ComparisonTrace:
    kind: LossKind
    loss: list[float]
    normalized: list[float]
    ic: list[float]
    diverged_epoch: int | None = None


def min_max(values: Sequence[float]) -> list[float]:
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    if finite.size == 0:
        return [float("nan")] * arr.size
    lo, hi = finite.min(), finite.max()
    if hi == lo:
        return [0.0 if np.isfinite(v) else float("nan") for v in arr]
    return [float(v) for v in (arr - lo) / (hi - lo)]


def trailing_std(values: Sequence[float], window: int = 20) -> float:
    """Sample std of the last ``window`` values; ``inf`` if the tail holds a non-finite value (diverged run)."""
    tail = np.asarray(values[-window:], dtype=np.float64)
    if not np.all(np.isfinite(tail)):
        return float("inf")
    return float(tail.std(ddof=1)) if tail.size > 1 else 0.0


def loss_comparison(
    data: MarketBundle,
    kinds: Sequence[LossKind | str],
    epochs: int,
    config: TrainConfig = TrainConfig(),
    model_config: ModelConfig = ModelConfig(),
    valid: MarketBundle | None = None,
) -> list[ComparisonTrace]:
    """Train once per loss kind under identical seed and data.

    A run whose loss turns non-finite stops there; its remaining epochs are
    recorded as NaN.
    """
    kinds = [LossKind(k) for k in kinds]
    if len(kinds) < 2:
        raise ConfigError("loss comparison needs at least two kinds")
    results = []
    for kind in kinds:
        cfg = dataclasses.replace(config, loss_kind=kind, epochs=epochs)
        try:
            report = train(data, cfg, model_config, valid=valid)
            loss, ics, diverged = report.loss_trace, report.val_ic_trace, None
        except NonFiniteLoss as exc:
            logger.warning("%s diverged at epoch %s", kind.value, exc.epoch)
            loss = exc.loss_trace + [float("nan")] * (epochs - exc.epoch)
            ics = exc.ic_trace + [float("nan")] * (epochs - exc.epoch)
            diverged = exc.epoch
        results.append(ComparisonTrace(kind, loss, min_max(loss), ics, diverged))
    return results

