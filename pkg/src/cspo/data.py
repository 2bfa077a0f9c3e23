"""Market tensors, CSV interchange, return targets and the synthetic market.

All market data is held as dense ``[t, k, d']`` float64 arrays tagged with a
:class:`FeatureSchema`. Dates are ISO-8601 day strings and are only ever
compared, never used for arithmetic.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from .errors import (
    BoundaryOutOfRange,
    DataError,
    EmptyFile,
    NonMonotonicDates,
    NonPositivePrice,
    ShapeMismatch,
    UnknownAsset,
    UnknownFeature,
)

# imputation codes stored in MarketSeries.imputed
OBSERVED, FORWARD_FILLED, ZERO_FILLED = 0, 1, 2


class MarketKind(str, enum.Enum):
    STOCK = "stock"
    COMMODITY_FUTURES = "commodity_futures"
    FINANCIAL_FUTURES = "financial_futures"


@dataclass(frozen=True)
class FeatureSchema:
    feature_names: tuple[str, ...]
    asset_ids: tuple[str, ...]
    market_kind: MarketKind = MarketKind.STOCK

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "asset_ids", tuple(self.asset_ids))
        object.__setattr__(self, "market_kind", MarketKind(self.market_kind))
        if len(self.feature_names) < 1:
            raise DataError("schema needs at least one feature")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError("feature names must be unique")
        if len(set(self.asset_ids)) != len(self.asset_ids):
            raise DataError("asset ids must be unique")

    def with_assets(self, asset_ids: Sequence[str]) -> "FeatureSchema":
        return FeatureSchema(self.feature_names, tuple(asset_ids), self.market_kind)


@dataclass(frozen=True, eq=False)
class MarketSeries:
    """One market over ``t`` dates: ``values[i, j, f]`` is feature f of asset j on date i."""

    schema: FeatureSchema
    values: np.ndarray
    dates: tuple[str, ...]
    imputed: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        dates = tuple(str(d) for d in self.dates)
        expected = (len(dates), len(self.schema.asset_ids), len(self.schema.feature_names))
        if values.shape != expected:
            raise ShapeMismatch(f"values shape {values.shape} does not match (t, k, d') = {expected}")
        if any(a >= b for a, b in zip(dates, dates[1:])):
            raise NonMonotonicDates("dates must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise DataError("market values contain non-finite entries")
        imputed = self.imputed
        if imputed is None:
            imputed = np.zeros(values.shape, dtype=np.int8)
        elif np.shape(imputed) != values.shape:
            raise ShapeMismatch("imputation mask shape differs from values")
        values.setflags(write=False)
        imputed = np.asarray(imputed, dtype=np.int8)
        imputed.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "imputed", imputed)

    @property
    def t(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    @property
    def asset_ids(self) -> tuple[str, ...]:
        return self.schema.asset_ids

    def slice_dates(self, start: int, stop: int) -> "MarketSeries":
        return MarketSeries(self.schema, self.values[start:stop], self.dates[start:stop], self.imputed[start:stop])

    def permute_assets(self, perm: Sequence[int]) -> "MarketSeries":
        perm = list(perm)
        schema = self.schema.with_assets([self.asset_ids[i] for i in perm])
        return MarketSeries(schema, self.values[:, perm], self.dates, self.imputed[:, perm])

    def replace_values(self, values: np.ndarray) -> "MarketSeries":
        return MarketSeries(self.schema, values, self.dates)

    def equals(self, other: "MarketSeries") -> bool:
        return (
            self.schema == other.schema
            and self.dates == other.dates
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.imputed, other.imputed)
        )


@dataclass(frozen=True, eq=False)
class PriceSeries:
    prices: np.ndarray
    dates: tuple[str, ...]
    asset_ids: tuple[str, ...]

    def __post_init__(self):
        prices = np.asarray(self.prices, dtype=np.float64)
        if prices.ndim != 2 or prices.shape != (len(self.dates), len(self.asset_ids)):
            raise ShapeMismatch(f"prices shape {prices.shape} does not match dates x assets")
        if not np.all(np.isfinite(prices)) or np.any(prices <= 0):
            raise NonPositivePrice("prices must be finite and strictly positive")
        prices.setflags(write=False)
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "asset_ids", tuple(self.asset_ids))


@dataclass(frozen=True, eq=False)
class ReturnTarget:
    """``returns[i]`` is the relative move from ``dates[i]`` to the next date."""

    returns: np.ndarray
    dates: tuple[str, ...]
    asset_ids: tuple[str, ...]


def compute_returns(prices: PriceSeries) -> ReturnTarget:
    p = prices.prices
    if p.shape[0] < 2:
        raise DataError("need at least two dates to compute returns")
    if np.any(p <= 0):
        raise NonPositivePrice("prices must be strictly positive")
    returns = p[1:] / p[:-1] - 1.0
    return ReturnTarget(returns, prices.dates[:-1], prices.asset_ids)


# ---------------------------------------------------------------------------
# CSV interchange

def _normalize_dates(raw: pd.Series) -> pd.Series:
    try:
        parsed = pd.to_datetime(raw, format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise DataError(f"unparseable date column: {exc}") from exc
    return parsed.dt.strftime("%Y-%m-%d")


def _read_long_csv(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        frame = pd.read_csv(path, dtype={"date": str, "asset_id": str}, encoding="utf-8", float_precision="round_trip")
    except pd.errors.EmptyDataError as exc:
        raise EmptyFile(f"{path} is empty") from exc
    if frame.empty:
        raise EmptyFile(f"{path} has no data rows")
    for col in ("date", "asset_id"):
        if col not in frame.columns:
            raise UnknownFeature(f"{path} lacks required column {col!r}")
    frame["date"] = _normalize_dates(frame["date"])
    return frame


def infer_schema(path, market_kind: MarketKind | str = MarketKind.STOCK) -> FeatureSchema:
    """Schema from a long-format file: feature columns in file order, asset ids sorted."""
    frame = _read_long_csv(path)
    features = [c for c in frame.columns if c not in ("date", "asset_id")]
    assets = sorted(frame["asset_id"].unique())
    return FeatureSchema(tuple(features), tuple(assets), MarketKind(market_kind))


def load_market_csv(path, schema: FeatureSchema) -> MarketSeries:
    frame = _read_long_csv(path)
    features = [c for c in frame.columns if c not in ("date", "asset_id")]
    unknown = sorted(set(features) - set(schema.feature_names))
    if unknown:
        raise UnknownFeature(f"columns not in schema: {unknown}")
    missing = [f for f in schema.feature_names if f not in features]
    if missing:
        raise UnknownFeature(f"schema features absent from file: {missing}")
    asset_pos = {a: i for i, a in enumerate(schema.asset_ids)}
    strangers = sorted(set(frame["asset_id"]) - set(asset_pos))
    if strangers:
        raise UnknownAsset(f"assets not in schema: {strangers}")
    if frame.duplicated(["date", "asset_id"]).any():
        raise NonMonotonicDates("repeated (date, asset_id) rows: dates not strictly increasing per asset")

    dates = sorted(frame["date"].unique())
    date_pos = {d: i for i, d in enumerate(dates)}
    t, k, n_feat = len(dates), len(schema.asset_ids), len(schema.feature_names)
    dense = np.full((t, k, n_feat), np.nan)
    rows = frame["date"].map(date_pos).to_numpy()
    cols = frame["asset_id"].map(asset_pos).to_numpy()
    dense[rows, cols] = frame[list(schema.feature_names)].to_numpy(dtype=np.float64)
    if np.any(np.isinf(dense)):
        raise DataError("infinite values in input")

    imputed = np.zeros(dense.shape, dtype=np.int8)
    for i in range(1, t):
        gap = np.isnan(dense[i])
        dense[i][gap] = dense[i - 1][gap]
        imputed[i][gap] = FORWARD_FILLED
    leading = np.isnan(dense)
    dense[leading] = 0.0
    imputed[leading] = ZERO_FILLED
    return MarketSeries(schema, dense, tuple(dates), imputed)


def write_market_csv(series: MarketSeries, path) -> None:
    t, k, _ = series.values.shape
    frame = pd.DataFrame(series.values.reshape(t * k, -1), columns=list(series.schema.feature_names))
    frame.insert(0, "asset_id", np.tile(np.array(series.asset_ids, dtype=object), t))
    frame.insert(0, "date", np.repeat(np.array(series.dates, dtype=object), k))
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def load_prices_csv(path, asset_ids: Sequence[str] | None = None) -> PriceSeries:
    if asset_ids is None:
        asset_ids = infer_schema(path).asset_ids
    series = load_market_csv(path, FeatureSchema(("price",), tuple(asset_ids)))
    return PriceSeries(series.values[:, :, 0], series.dates, series.asset_ids)


def write_prices_csv(prices: PriceSeries, path) -> None:
    series = MarketSeries(FeatureSchema(("price",), prices.asset_ids), prices.prices[:, :, None], prices.dates)
    write_market_csv(series, path)


# ---------------------------------------------------------------------------
# splitting

def split_by_date(series: MarketSeries, boundary: str) -> tuple[MarketSeries, MarketSeries]:
    """Train gets dates strictly before ``boundary``; eval gets the rest."""
    if not isinstance(boundary, str) or not boundary:
        raise BoundaryOutOfRange(f"boundary must be a non-empty date string, got {boundary!r}")
    try:
        boundary = pd.Timestamp(boundary).strftime("%Y-%m-%d")
    except ValueError as exc:
        raise BoundaryOutOfRange(f"unparseable boundary {boundary!r}") from exc
    cut = int(np.searchsorted(np.array(series.dates, dtype=object), boundary, side="left")) if series.t else 0
    return series.slice_dates(0, cut), series.slice_dates(cut, series.t)


def concat_dates(first: MarketSeries, second: MarketSeries) -> MarketSeries:
    if first.schema != second.schema:
        raise ShapeMismatch("cannot concatenate series with different schemas")
    return MarketSeries(
        first.schema,
        np.concatenate([first.values, second.values]),
        first.dates + second.dates,
        np.concatenate([first.imputed, second.imputed]),
    )


# ---------------------------------------------------------------------------
# synthetic market

RETURN_SCALE = 0.01


@dataclass(frozen=True, eq=False)
class SyntheticMarket:
    """Generated markets plus the planted futures->return map.

    Iterates as ``(stock, commodity, financial, prices)``. Loadings are indexed
    ``[stock, futures asset, feature]`` so that, at full signal strength,
    ``returns[i] == einsum('skf,kf->s', commodity_loadings, C[i]) + (same for E)``.
    """

    stock: MarketSeries
    commodity: MarketSeries
    financial: MarketSeries
    prices: PriceSeries
    commodity_loadings: np.ndarray
    financial_loadings: np.ndarray
    signal_strength: float = 0.0
    index_returns: np.ndarray = field(default=None)

    def __iter__(self) -> Iterator:
        return iter((self.stock, self.commodity, self.financial, self.prices))

    def planted_returns(self) -> np.ndarray:
        """Noise-free part of the next-day returns, one row per anchor date."""
        c = np.einsum("skf,tkf->ts", self.commodity_loadings, self.commodity.values[:-1])
        e = np.einsum("skf,tkf->ts", self.financial_loadings, self.financial.values[:-1])
        return c + e


def _angle_gap(a, b):
    gap = np.abs(a - b) % (2 * np.pi)
    return np.minimum(gap, 2 * np.pi - gap)


def _futures_features(increments, angles, n_features):
    t, k = increments.shape
    level = np.cumsum(increments, axis=0)
    cols = [level, increments, np.broadcast_to(np.cos(angles), (t, k)), np.broadcast_to(np.sin(angles), (t, k))]
    for lag in range(1, max(0, n_features - 4) + 1):
        lagged = np.zeros_like(increments)
        lagged[lag:] = increments[:-lag]
        cols.append(lagged)
    return np.stack(cols[:n_features], axis=-1)


def _names(n_features, first):
    base = [first, "ret_1", "sector_cos", "sector_sin"]
    base += [f"ret_{lag + 1}" for lag in range(1, max(0, n_features - 4) + 1)]
    return tuple(base[:n_features])


def synthesize_market(
    seed: int,
    t: int,
    k_s: int,
    k_c: int,
    k_e: int,
    d_prime: int = 4,
    signal_strength: float = 0.9,
    start_date: str = "2010-01-04",
) -> SyntheticMarket:
    """Random-walk futures with a sparse planted link into next-day stock returns.

    Each futures contract sits at a fixed angle on a "sector circle" and each
    stock at a random angle; a stock loads on the nearest commodity and the
    nearest financial contract. The angles are exposed as the static
    ``sector_cos``/``sector_sin`` features so the link is discoverable by an
    asset-permutation-equivariant model. Next-day return of stock ``i`` is
    ``s * (loadings . current futures features) + (1 - s) * 0.01 * noise``.
    """
    if min(t, k_s, k_c, k_e, d_prime) < 1 or t < 3:
        raise DataError("sizes must be >= 1 and t >= 3")
    if not 0.0 <= signal_strength <= 1.0:
        raise DataError("signal_strength must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    dates = tuple(pd.bdate_range(start_date, periods=t).strftime("%Y-%m-%d"))

    theta_c = 2 * np.pi * np.arange(k_c) / k_c
    theta_e = 2 * np.pi * (np.arange(k_e) + 0.5) / k_e
    phi = rng.uniform(0.0, 2 * np.pi, size=k_s)
    inc_c = RETURN_SCALE * rng.standard_normal((t, k_c))
    inc_e = RETURN_SCALE * rng.standard_normal((t, k_e))
    noise = RETURN_SCALE * rng.standard_normal((t - 1, k_s))
    log_p0 = np.log(100.0) + 0.1 * rng.standard_normal(k_s)

    commodity = _futures_features(inc_c, theta_c, d_prime)
    financial = _futures_features(inc_e, theta_e, d_prime)

    # feature the map reads: the current increment, or the level when d' == 1
    target = 1 if d_prime >= 2 else 0
    load_c = np.zeros((k_s, k_c, d_prime))
    load_e = np.zeros((k_s, k_e, d_prime))
    weight = signal_strength / np.sqrt(2.0)
    load_c[np.arange(k_s), np.argmin(_angle_gap(phi[:, None], theta_c[None]), axis=1), target] = weight
    load_e[np.arange(k_s), np.argmin(_angle_gap(phi[:, None], theta_e[None]), axis=1), target] = weight
    planted = np.einsum("skf,tkf->ts", load_c, commodity[:-1]) + np.einsum("skf,tkf->ts", load_e, financial[:-1])
    returns = planted + (1.0 - signal_strength) * noise

    prices = np.empty((t, k_s))
    prices[0] = np.exp(log_p0)
    for i in range(1, t):
        prices[i] = prices[i - 1] * (1.0 + returns[i - 1])

    realized = np.zeros((t, k_s))
    realized[1:] = prices[1:] / prices[:-1] - 1.0
    cols = [np.log(prices), realized, np.broadcast_to(np.cos(phi), (t, k_s)), np.broadcast_to(np.sin(phi), (t, k_s))]
    for lag in range(1, max(0, d_prime - 4) + 1):
        lagged = np.zeros_like(realized)
        lagged[lag:] = realized[:-lag]
        cols.append(lagged)
    stock = np.stack(cols[:d_prime], axis=-1)

    stock_ids = tuple(f"S{i:03d}" for i in range(k_s))
    make = lambda values, prefix, first, kind: MarketSeries(
        FeatureSchema(_names(d_prime, first), tuple(f"{prefix}{j:03d}" for j in range(values.shape[1])), kind),
        values,
        dates,
    )
    return SyntheticMarket(
        stock=make(stock, "S", "log_price", MarketKind.STOCK),
        commodity=make(commodity, "C", "level", MarketKind.COMMODITY_FUTURES),
        financial=make(financial, "E", "level", MarketKind.FINANCIAL_FUTURES),
        prices=PriceSeries(prices, dates, stock_ids),
        commodity_loadings=load_c,
        financial_loadings=load_e,
        signal_strength=float(signal_strength),
        index_returns=(prices[1:] / prices[:-1] - 1.0).mean(axis=1),
    )


@dataclass(frozen=True, eq=False)
class MarketBundle:
    """Date-aligned stock, commodity, financial series and stock prices."""

    stock: MarketSeries
    commodity: MarketSeries
    financial: MarketSeries
    prices: PriceSeries

    def __post_init__(self):
        dates = self.stock.dates
        if self.commodity.dates != dates or self.financial.dates != dates or self.prices.dates != dates:
            raise ShapeMismatch("stock, futures and price series must share the same dates")
        if self.prices.asset_ids != self.stock.asset_ids:
            raise ShapeMismatch("price assets must match stock assets")

    @property
    def dates(self) -> tuple[str, ...]:
        return self.stock.dates

    @property
    def t(self) -> int:
        return self.stock.t

    def index_of(self, date: str) -> int:
        return int(np.searchsorted(np.array(self.dates, dtype=object), date, side="left"))


def bundle(market) -> MarketBundle:
    s, c, e, p = market
    return MarketBundle(s, c, e, p)


MARKET_FILES = {"stock": "stock.csv", "commodity": "commodity.csv", "financial": "financial.csv"}


def write_market_dir(market, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s, c, e, p = market
    paths = {name: out / fname for name, fname in MARKET_FILES.items()}
    write_market_csv(s, paths["stock"])
    write_market_csv(c, paths["commodity"])
    write_market_csv(e, paths["financial"])
    paths["prices"] = out / "prices.csv"
    write_prices_csv(p, paths["prices"])
    index = (p.prices[1:] / p.prices[:-1] - 1.0).mean(axis=1)
    paths["index"] = out / "index.csv"
    pd.DataFrame({"date": list(p.dates[:-1]), "index_return": index}).to_csv(
        paths["index"], index=False, lineterminator="\n"
    )
    return paths


def load_market_dir(data_dir) -> MarketBundle:
    data = Path(data_dir)
    kinds = {
        "stock": MarketKind.STOCK,
        "commodity": MarketKind.COMMODITY_FUTURES,
        "financial": MarketKind.FINANCIAL_FUTURES,
    }
    loaded = {}
    for name, fname in MARKET_FILES.items():
        path = data / fname
        loaded[name] = load_market_csv(path, infer_schema(path, kinds[name]))
    prices = load_prices_csv(data / "prices.csv", loaded["stock"].asset_ids)
    return MarketBundle(loaded["stock"], loaded["commodity"], loaded["financial"], prices)


def load_index_csv(path) -> tuple[tuple[str, ...], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        frame = pd.read_csv(path, dtype={"date": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError as exc:
        raise EmptyFile(f"{path} is empty") from exc
    if frame.empty or "index_return" not in frame.columns or "date" not in frame.columns:
        raise DataError(f"{path} needs non-empty date,index_return columns")
    frame["date"] = _normalize_dates(frame["date"])
    frame = frame.sort_values("date")
    return tuple(frame["date"]), frame["index_return"].to_numpy(dtype=np.float64)
