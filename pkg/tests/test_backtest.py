import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cspo.backtest import (
    BacktestLedger,
    StrategyConfig,
    annualized_return,
    basket_size,
    downside_deviation,
    drifted,
    max_drawdown,
    portfolio_metrics,
    run_backtest,
    select_top,
    sharpe,
    sortino,
    turnover_rate,
    winning_rate,
)
from cspo.errors import ConfigError, NoDownsideDays, NonPositiveEquity, ShapeMismatch, ZeroDispersion

GOLDEN = Path(__file__).parent / "golden" / "backtest_3x3.json"


def brute_force_drawdown(equity):
    best, peak = 0.0, 0
    for i in range(len(equity)):
        for j in range(i, len(equity)):
            dd = (equity[i] - equity[j]) / equity[i]
            if dd > best:
                best, peak = dd, i
    if best == 0.0:
        return 0.0, 0
    end = next((j for j in range(peak + 1, len(equity)) if equity[j] >= equity[peak]), len(equity))
    return best, end - peak - 1


def run_golden_case(golden, name):
    case = golden["cases"][name]
    inputs = case["inputs"]
    config = StrategyConfig(
        top_fraction=inputs["top_fraction"], hedged=inputs["hedged"], transaction_cost_bps=inputs["transaction_cost_bps"]
    )
    ledger = run_backtest(inputs["preds"], golden["realized"], golden["index"], config, golden["assets"])
    return case, ledger, portfolio_metrics(ledger, config)


@pytest.mark.parametrize("name", ["top1_spot_cost10", "top1_hedged", "top2_spot_cost5", "top2_hold_hedged_cost20"])
def test_golden_ledger_and_metrics(name):
    golden = json.loads(GOLDEN.read_text())
    case, ledger, metrics = run_golden_case(golden, name)
    for field in ("weights", "turnover", "spot_returns", "portfolio_returns", "equity"):
        np.testing.assert_allclose(getattr(ledger, field), case["ledger"][field], rtol=0, atol=1e-12)
    assert set(metrics) == set(case["metrics"])
    for key, expected in case["metrics"].items():
        if isinstance(expected, int) and not isinstance(expected, bool):
            assert metrics[key] == expected
        else:
            assert metrics[key] == pytest.approx(expected, rel=0, abs=1e-12)


def test_single_asset_spot_tracks_the_asset():
    realized = np.array([[0.01], [-0.02], [0.03]])
    ledger = run_backtest(np.ones((3, 1)), realized, np.zeros(3), StrategyConfig(top_fraction=1.0))
    assert np.array_equal(ledger.portfolio_returns, realized[:, 0])
    assert turnover_rate(ledger) == 0.0


def test_self_hedge_is_flat():
    g = np.random.default_rng(0)
    realized = g.normal(0, 0.01, size=(6, 4))
    preds = g.normal(size=(6, 4))
    spot = run_backtest(preds, realized, np.zeros(6), StrategyConfig(top_fraction=0.5))
    hedged = run_backtest(preds, realized, spot.spot_returns, StrategyConfig(top_fraction=0.5, hedged=True))
    assert np.all(hedged.portfolio_returns == 0.0)


def test_full_basket_is_equal_weight_market():
    g = np.random.default_rng(1)
    realized = g.normal(0, 0.01, size=(5, 4))
    ledger = run_backtest(g.normal(size=(5, 4)), realized, np.zeros(5), StrategyConfig(top_fraction=1.0))
    np.testing.assert_allclose(ledger.portfolio_returns, realized.mean(1), rtol=0, atol=1e-17)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3), st.booleans())
def test_ledger_properties(seed, scale, hedged):
    g = np.random.default_rng(seed)
    n, k = 7, 5
    preds, realized, index = g.normal(size=(n, k)), g.normal(0, 0.02, size=(n, k)), g.normal(0, 0.01, size=n)
    config = StrategyConfig(top_fraction=0.4, hedged=hedged, transaction_cost_bps=3)
    ledger = run_backtest(preds, realized, index, config)
    np.testing.assert_allclose(ledger.weights.sum(1), 1.0, rtol=0, atol=1e-15)
    assert np.all(ledger.weights >= 0)
    if hedged:
        assert np.array_equal(ledger.portfolio_returns, ledger.spot_returns - index)
    scaled = run_backtest(preds * scale, realized, index, config)
    assert scaled.equity.tobytes() == ledger.equity.tobytes()
    assert scaled.weights.tobytes() == ledger.weights.tobytes()


def test_tie_break_by_asset_id():
    assert list(select_top(np.array([1.0, 2.0, 2.0]), ["c", "b", "a"], 1)) == [2]
    assert list(select_top(np.array([1.0, 1.0, 1.0]), ["b", "c", "a"], 2)) == [2, 0]


def test_basket_size_rounding():
    assert basket_size(0.1, 30) == 3
    assert basket_size(0.1, 31) == 4
    assert basket_size(0.01, 5) == 1
    assert basket_size(1.0, 5) == 5


def test_backtest_input_errors():
    with pytest.raises(ShapeMismatch):
        run_backtest(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros(3))
    with pytest.raises(ShapeMismatch):
        run_backtest(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        run_backtest(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ConfigError):
        StrategyConfig(top_fraction=0.0)
    with pytest.raises(ConfigError):
        StrategyConfig(transaction_cost_bps=-1)


def test_annualized_return_examples():
    assert annualized_return(np.ones(10)) == 0.0
    assert annualized_return(np.linspace(1, 2, 253)) == pytest.approx(1.0, rel=1e-14)
    assert annualized_return(np.linspace(1, 0.5, 253)) == pytest.approx(-0.5, rel=1e-14)
    with pytest.raises(NonPositiveEquity):
        annualized_return([1.0, 0.0])


def test_winning_rate_examples():
    assert winning_rate([0.1, 0.2]) == 1.0
    assert winning_rate([0.0, 0.0]) == 0.0
    assert winning_rate([1, -1, 1, 0]) == 0.5


def test_sharpe_sortino_examples():
    assert sharpe([0.01, -0.01]) == 0.0
    assert sortino([0.01, -0.01]) == 0.0
    with pytest.raises(ZeroDispersion):
        sharpe([0.01] * 5)
    with pytest.raises(NoDownsideDays):
        sortino([0.01, 0.02])
    with pytest.raises(NoDownsideDays):
        sortino([0.01, -5e-324, 0.02])
    r = np.array([0.02, -0.01, 0.005, 0.0])
    assert sharpe(r) == pytest.approx(r.mean() / r.std(ddof=1) * math.sqrt(252), rel=1e-14)
    assert downside_deviation(r) == pytest.approx(math.sqrt(0.01**2 / 4), rel=1e-14)
    config = StrategyConfig(risk_free_rate=0.0252)
    assert sharpe(r, config) == pytest.approx((r.mean() - 1e-4) / r.std(ddof=1) * math.sqrt(252), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.05, 0.05), min_size=3, max_size=30))
def test_sortino_vs_sharpe_by_denominator(values):
    r = np.array(values)
    try:
        sh, so = sharpe(r), sortino(r)
    except ZeroDispersion:
        return
    if r.mean() > 0:
        assert (so >= sh) == (downside_deviation(r) <= r.std(ddof=1))


def test_max_drawdown_examples():
    assert max_drawdown([1.0, 1.1, 1.3]) == (0.0, 0)
    md, days = max_drawdown([1.0, 1.2, 0.9, 1.1])
    assert md == pytest.approx(0.25, abs=1e-15) and days == 2
    assert max_drawdown([1.0, 0.5, 1.5]) == (0.5, 1)


def test_max_drawdown_matches_pairwise_oracle():
    g = np.random.default_rng(7)
    for _ in range(500):
        n = int(g.integers(1, 60))
        equity = np.cumprod(1 + g.normal(0, 0.03, size=n))
        md, days = max_drawdown(equity)
        ref_md, ref_days = brute_force_drawdown(list(equity))
        assert abs(md - ref_md) <= 1e-12 and days == ref_days


def test_turnover_examples():
    # two disjoint equal-weight baskets alternating every day
    preds = np.array([[1, 1, 0, 0], [0, 0, 1, 1]] * 3, dtype=float)
    ledger = run_backtest(preds, np.zeros((6, 4)), np.zeros(6), StrategyConfig(top_fraction=0.5), list("abcd"))
    assert turnover_rate(ledger) == 1.0
    # held name under a single-asset basket never turns over
    preds = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.5]])
    held = run_backtest(preds, np.full((3, 2), 0.01), np.zeros(3), StrategyConfig(top_fraction=0.5), ["a", "b"])
    assert turnover_rate(held) == 0.0


def test_half_book_shift():
    # 50/50 -> 100% in one asset, flat prices: half the book moves
    prior = drifted(np.array([0.5, 0.5]), np.zeros(2))
    moved = 0.5 * np.abs(np.array([1.0, 0.0]) - prior).sum()
    assert moved == 0.5
    ledger = BacktestLedger(np.array([[0.5, 0.5], [1.0, 0.0]]), np.zeros(2), np.zeros(2), np.zeros(2), np.ones(3), np.array([0.0, moved]))
    assert turnover_rate(ledger) == 0.5
