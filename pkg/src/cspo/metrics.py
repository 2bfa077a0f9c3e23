"""Cross-sectional forecast quality: IC, rank IC and their information ratios."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeMismatch, ZeroDispersion

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DailyPanel:
    """Per-date prediction / realized-return pairs with a shared asset order per day."""

    predictions: Sequence[np.ndarray]
    realized: Sequence[np.ndarray]
    dates: Sequence[str] = field(default=())

    def __post_init__(self):
        preds = [np.asarray(p, dtype=np.float64) for p in self.predictions]
        real = [np.asarray(r, dtype=np.float64) for r in self.realized]
        if len(preds) != len(real):
            raise ShapeMismatch("predictions and realized returns cover different numbers of days")
        for p, r in zip(preds, real):
            if p.shape != r.shape or p.ndim != 1:
                raise ShapeMismatch(f"day shapes differ: {p.shape} vs {r.shape}")
        dates = tuple(self.dates) if len(self.dates) else tuple(str(i) for i in range(len(preds)))
        if len(dates) != len(preds):
            raise ShapeMismatch("dates length differs from number of days")
        object.__setattr__(self, "predictions", preds)
        object.__setattr__(self, "realized", real)
        object.__setattr__(self, "dates", dates)

    @classmethod
    def from_matrix(cls, predictions, realized, dates=()) -> "DailyPanel":
        return cls(list(np.asarray(predictions)), list(np.asarray(realized)), dates)

    def __len__(self):
        return len(self.predictions)


def _pearson(x, y):
    """Correlation, or NaN when either side has no spread (degenerate day)."""
    if x.size < 2:
        return np.nan
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(xc, xc), np.dot(yc, yc)
    if sxx <= 0 or syy <= 0:
        return np.nan
    return float(np.dot(xc, yc) / np.sqrt(sxx * syy))


def _daily(panel: DailyPanel, transform) -> tuple[float, np.ndarray]:
    daily = np.array([_pearson(transform(p), transform(r)) for p, r in zip(panel.predictions, panel.realized)])
    skipped = [d for d, v in zip(panel.dates, daily) if np.isnan(v)]
    if skipped:
        logger.info("skipped %d degenerate day(s): %s", len(skipped), skipped[:5])
    valid = daily[~np.isnan(daily)]
    mean = float(valid.mean()) if valid.size else float("nan")
    return mean, daily


def ic(panel: DailyPanel) -> tuple[float, np.ndarray]:
    """Mean daily Pearson correlation; degenerate days appear as NaN and are left out of the mean."""
    return _daily(panel, lambda x: x)


def rank_ic(panel: DailyPanel) -> tuple[float, np.ndarray]:
    return _daily(panel, lambda x: rankdata(x, method="average"))


def ir(daily_values) -> float:
    values = np.asarray(daily_values, dtype=np.float64)
    values = values[~np.isnan(values)]
    if values.size < 2:
        raise ZeroDispersion("information ratio needs at least two values")
    std = values.std(ddof=1)
    if std == 0:
        raise ZeroDispersion("daily values have zero dispersion")
    return float(values.mean() / std)


def skipped_days(daily: np.ndarray) -> int:
    return int(np.isnan(daily).sum())


def summarize(panel: DailyPanel) -> dict:
    mean_ic, daily_ic = ic(panel)
    mean_ric, daily_ric = rank_ic(panel)

    def safe_ir(values):
        try:
            return ir(values)
        except ZeroDispersion:
            return None

    return {
        "ic": mean_ic,
        "ric": mean_ric,
        "ir_ic": safe_ir(daily_ic),
        "ir_rank_ic": safe_ir(daily_ric),
        "n_days": len(panel),
        "skipped_days": skipped_days(daily_ic),
    }
