"""Daily-rebalanced top-basket backtest with optional index hedge, and portfolio metrics.

Conventions:
  * ``realized[i]`` is the return earned from holding on day ``i`` (from date i
    to date i+1), i.e. it is what prediction ``preds[i]`` forecasts.
  * The initial purchase on day 0 is not counted as turnover; turnover and its
    cost start with the first rebalance.
  * The equity curve starts at 1.0 and has ``n_days + 1`` points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptySelection, NoDownsideDays, NonPositiveEquity, ShapeMismatch, ZeroDispersion


@dataclass(frozen=True)
class StrategyConfig:
    top_fraction: float = 0.1
    hedged: bool = False
    transaction_cost_bps: float = 0.0
    trading_days_per_year: int = 252
    risk_free_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.top_fraction <= 1.0:
            raise ConfigError("top_fraction must lie in (0, 1]")
        if self.transaction_cost_bps < 0:
            raise ConfigError("transaction_cost_bps must be >= 0")
        if self.trading_days_per_year < 1:
            raise ConfigError("trading_days_per_year must be positive")


@dataclass(frozen=True, eq=False)
class BacktestLedger:
    weights: np.ndarray  # [n, k]
    portfolio_returns: np.ndarray  # [n] net daily P&L (hedged if configured)
    spot_returns: np.ndarray  # [n] long basket P&L after costs
    index_returns: np.ndarray  # [n]
    equity: np.ndarray  # [n + 1]
    turnover: np.ndarray  # [n], day 0 is 0 by convention
    dates: tuple = ()
    asset_ids: tuple = ()


def basket_size(top_fraction: float, k: int) -> int:
    # guard against 0.1 * 30 == 3.0000000000000004
    return max(1, min(k, math.ceil(top_fraction * k - 1e-9)))


def select_top(preds: np.ndarray, asset_ids: Sequence[str], m: int) -> np.ndarray:
    """Indices of the ``m`` highest predictions; ties go to the lexically smaller asset id."""
    order = sorted(range(len(preds)), key=lambda j: (-preds[j], asset_ids[j]))
    return np.array(order[:m], dtype=int)


def drifted(weights: np.ndarray, returns: np.ndarray) -> np.ndarray:
    grown = weights * (1.0 + returns)
    total = grown.sum()
    return grown / total if total > 0 else np.zeros_like(weights)


def run_backtest(preds, realized, index_returns, config: StrategyConfig = StrategyConfig(), asset_ids=None, dates=()):
    preds = np.asarray(preds, dtype=np.float64)
    realized = np.asarray(realized, dtype=np.float64)
    index_returns = np.asarray(index_returns, dtype=np.float64)
    if preds.ndim != 2 or preds.shape != realized.shape:
        raise ShapeMismatch(f"preds {preds.shape} and realized {realized.shape} must be equal [n_days, k]")
    n, k = preds.shape
    if index_returns.shape != (n,):
        raise ShapeMismatch(f"index_returns must have shape ({n},)")
    if n < 2:
        raise ShapeMismatch("backtest needs at least two days")
    if k == 0:
        raise EmptySelection("no assets to select from")
    if asset_ids is None:
        asset_ids = tuple(f"{j:06d}" for j in range(k))
    asset_ids = tuple(asset_ids)
    m = basket_size(config.top_fraction, k)
    cost_rate = config.transaction_cost_bps / 1e4

    weights = np.zeros((n, k))
    turnover = np.zeros(n)
    spot = np.zeros(n)
    for i in range(n):
        chosen = select_top(preds[i], asset_ids, m)
        if chosen.size == 0:
            raise EmptySelection(f"empty basket on day {i}")
        weights[i, chosen] = 1.0 / m
        if i > 0:
            turnover[i] = 0.5 * np.abs(weights[i] - drifted(weights[i - 1], realized[i - 1])).sum()
        spot[i] = weights[i] @ realized[i] - turnover[i] * cost_rate
    pnl = spot - index_returns if config.hedged else spot.copy()
    equity = np.concatenate([[1.0], np.cumprod(1.0 + pnl)])
    return BacktestLedger(weights, pnl, spot, index_returns, equity, turnover, tuple(dates), asset_ids)


# ---------------------------------------------------------------------------
# metrics

def annualized_return(equity, config: StrategyConfig = StrategyConfig()) -> float:
    equity = np.asarray(equity, dtype=np.float64)
    if equity.size < 2:
        raise ShapeMismatch("need at least one period of equity")
    if np.any(equity <= 0):
        raise NonPositiveEquity("equity must stay strictly positive")
    n = equity.size - 1
    return float((equity[-1] / equity[0]) ** (config.trading_days_per_year / n) - 1.0)


def winning_rate(daily_pnl) -> float:
    pnl = np.asarray(daily_pnl, dtype=np.float64)
    if pnl.size < 1:
        raise ShapeMismatch("winning rate needs at least one day")
    return float(np.mean(pnl > 0))


def _excess(daily_returns, config):
    r = np.asarray(daily_returns, dtype=np.float64)
    if r.size < 2:
        raise ZeroDispersion("ratio needs at least two days")
    return r - config.risk_free_rate / config.trading_days_per_year


def sharpe(daily_returns, config: StrategyConfig = StrategyConfig()) -> float:
    excess = _excess(daily_returns, config)
    std = excess.std(ddof=1)
    if std <= 1e-15 * max(1.0, np.abs(excess).max()):
        raise ZeroDispersion("returns have zero dispersion")
    return float(excess.mean() / std * np.sqrt(config.trading_days_per_year))


def downside_deviation(daily_returns, config: StrategyConfig = StrategyConfig()) -> float:
    excess = _excess(daily_returns, config)
    below = np.minimum(excess, 0.0)
    return float(np.sqrt(np.sum(below**2) / excess.size))


def sortino(daily_returns, config: StrategyConfig = StrategyConfig()) -> float:
    excess = _excess(daily_returns, config)
    down = downside_deviation(daily_returns, config)
    if not np.any(excess < 0) or down == 0.0:  # the latter: losses so small their squares underflow
        raise NoDownsideDays("no day below the risk-free rate")
    return float(excess.mean() / down * np.sqrt(config.trading_days_per_year))


def max_drawdown(equity) -> tuple[float, int]:
    """Largest relative peak-to-trough fall and its duration in days.

    The duration counts the days spent below the drawdown's peak: from the day
    after the peak up to (excluding) the first day equity is back at or above
    it, or to the end of the series if it never recovers.
    """
    equity = np.asarray(equity, dtype=np.float64)
    if equity.size < 1:
        raise ShapeMismatch("empty equity curve")
    peak_idx = 0
    best, best_peak = 0.0, 0
    for j in range(equity.size):
        if equity[j] > equity[peak_idx]:
            peak_idx = j
        dd = (equity[peak_idx] - equity[j]) / equity[peak_idx]
        if dd > best:
            best, best_peak = dd, peak_idx
    if best == 0.0:
        return 0.0, 0
    peak = equity[best_peak]
    after = np.nonzero(equity[best_peak + 1 :] >= peak)[0]
    recovery = best_peak + 1 + int(after[0]) if after.size else equity.size
    return float(best), int(recovery - best_peak - 1)


def turnover_rate(ledger: BacktestLedger) -> float:
    if ledger.turnover.size < 2:
        raise ShapeMismatch("turnover rate needs at least two days")
    return float(ledger.turnover[1:].mean())


def _or_none(fn, *args):
    try:
        return fn(*args)
    except ZeroDispersion:
        return None


def portfolio_metrics(ledger: BacktestLedger, config: StrategyConfig = StrategyConfig()) -> dict:
    md, md_days = max_drawdown(ledger.equity)
    return {
        "annualized_return": annualized_return(ledger.equity, config),
        "winning_rate": winning_rate(ledger.portfolio_returns),
        "sortino": _or_none(sortino, ledger.portfolio_returns, config),
        "sharpe": _or_none(sharpe, ledger.portfolio_returns, config),
        "max_drawdown": md,
        "max_drawdown_duration": md_days,
        "turnover_rate": turnover_rate(ledger),
    }
