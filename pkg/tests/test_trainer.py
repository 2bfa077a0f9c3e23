import math

import numpy as np
import pytest
import torch

from cspo.checkpoint import decode_archive, encode_archive, load_archive
from cspo.data import MarketBundle, synthesize_market
from cspo.errors import ConfigConflict, ConfigError, DataError, InsufficientHistory
from cspo.model import CSPOModel, ModelConfig, build_model
from cspo.objective import LossKind
from cspo.trainer import (
    TrainConfig,
    Windows,
    gradient_check,
    holdout_ic,
    loss_comparison,
    min_max,
    predict,
    split_bundle,
    train,
    trailing_std,
)

TINY = ModelConfig(d=8, enc_layers=1, enc_heads=2, cme_layers=1, pmf_layers=1, bdp_heads=2, pv_layers=1, pv_heads=2)


@pytest.fixture(scope="module")
def small_market():
    return MarketBundle(*synthesize_market(3, 40, 4, 2, 2, 4, 0.9))


def quick(**kw):
    base = dict(epochs=2, batch_days=8, lookback_t=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_config_rejections():
    with pytest.raises(ConfigConflict):
        TrainConfig(ablation={"no_pv"}, loss_kind="cspo_final")
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(ablation={"no_attention"})
    assert TrainConfig(ablation={"no_pv"}, loss_kind="mse").ablation == frozenset({"no_pv"})


def test_train_config_round_trip():
    cfg = TrainConfig(learning_rate=1e-4, ablation={"no_futures"}, loss_kind="hetero_reg")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_insufficient_history():
    data = MarketBundle(*synthesize_market(0, 4, 2, 1, 1, 2, 0.5))
    with pytest.raises(InsufficientHistory):
        train(data, quick(lookback_t=4), TINY)


def test_windows_align_inputs_and_targets(small_market):
    w = Windows(small_market, 4, dtype=torch.float64)
    anchors = w.anchors()
    assert anchors[0] == 3 and anchors[-1] == small_market.t - 2
    stock, com, fin = w.inputs(anchors[:2])
    assert stock.shape == (2, 4, 4, 4) and com.shape == (2, 4, 2, 4)
    np.testing.assert_array_equal(stock[1].numpy(), small_market.stock.values[1:5])
    p = small_market.prices.prices
    np.testing.assert_allclose(w.target(anchors[:1]).numpy()[0], p[4] / p[3] - 1)
    assert w.anchors(need_target=False)[-1] == small_market.t - 1


def test_split_keeps_context(small_market):
    train_part, hold = split_bundle(small_market, small_market.dates[30], 4)
    assert train_part.t == 30
    assert hold.dates[0] == small_market.dates[27] and hold.t == 13


def test_traces_have_one_entry_per_epoch(small_market):
    tr, ho = split_bundle(small_market, small_market.dates[30], 4)
    report = train(tr, quick(epochs=3), TINY, valid=ho)
    assert len(report.loss_trace) == len(report.val_ic_trace) == 3
    assert all(math.isfinite(v) for v in report.loss_trace)


def test_training_is_bitwise_reproducible(small_market, tmp_path):
    a = train(small_market, quick(), TINY, checkpoint_path=tmp_path / "a.ckpt")
    b = train(small_market, quick(), TINY, checkpoint_path=tmp_path / "b.ckpt")
    assert a.loss_trace == b.loss_trace
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert a.checkpoint_id == b.checkpoint_id
    c = train(small_market, quick(seed=1), TINY, checkpoint_path=tmp_path / "c.ckpt")
    assert c.checkpoint_id != a.checkpoint_id


def test_checkpoint_round_trip(small_market, tmp_path):
    report = train(small_market, quick(epochs=1), TINY, checkpoint_path=tmp_path / "m.ckpt")
    loaded, meta = CSPOModel.load(tmp_path / "m.ckpt")
    assert meta["model_config"] == TINY.to_dict()
    before = predict(report.model, small_market, 4, emit_volatility=True)
    after = predict(loaded, small_market, 4, emit_volatility=True)
    np.testing.assert_allclose(after.r_hat, before.r_hat, rtol=0, atol=1e-7)
    np.testing.assert_allclose(after.gamma, before.gamma, rtol=0, atol=1e-7)


def test_archive_format_checks():
    blob = encode_archive({"b": torch.ones(2, 3), "a": torch.arange(4.0)}, {"x": 1})
    tensors, meta = decode_archive(blob)
    assert list(tensors) == ["a", "b"] and meta == {"x": 1}
    assert torch.equal(tensors["b"], torch.ones(2, 3))
    with pytest.raises(DataError):
        decode_archive(b"NOTACKPT" + blob[8:])
    with pytest.raises(DataError):
        decode_archive(blob + b"\0")
    with pytest.raises(DataError):
        load_archive("/nonexistent/model.ckpt")


def test_no_futures_ignores_futures(small_market):
    torch.manual_seed(0)
    model = build_model(small_market, TINY, {"no_futures"}).double().eval()
    w = Windows(small_market, 4, dtype=torch.float64)
    stock, com, fin = w.inputs(w.anchors()[:5])
    base = model(stock, com, fin).r_hat
    assert torch.equal(model(stock, com * 100 + 3, torch.randn_like(fin)).r_hat, base)
    assert torch.equal(model(stock).r_hat, base)
    full = build_model(small_market, TINY).double().eval()
    with pytest.raises(DataError):
        full(stock)


def test_no_bdp_dataflow(small_market):
    torch.manual_seed(0)
    model = build_model(small_market, TINY, {"no_bdp"}).double().eval()
    w = Windows(small_market, 4, dtype=torch.float64)
    stock, com, fin = w.inputs(w.anchors()[:3])
    out = model(stock, com, fin)
    s_star = model.encoders["stock"](model.standardize("stock", stock))
    c_star = model.encoders["commodity"](model.standardize("commodity", com))
    e_star = model.encoders["financial"](model.standardize("financial", fin))
    core = model.core
    h = s_star + c_star.mean(-2, keepdim=True) + e_star.mean(-2, keepdim=True)
    expected = core.head(core.lin2(torch.relu(core.lin1(h)))).squeeze(-1)
    torch.testing.assert_close(out.r_hat, expected, rtol=0, atol=1e-13)


def test_no_pv_has_no_gamma(small_market):
    report = train(small_market, quick(epochs=1, ablation={"no_pv"}, loss_kind="mse"), TINY)
    assert len(report.model.pv_members) == 0
    assert predict(report.model, small_market, 4, emit_volatility=True).gamma is None


@pytest.mark.parametrize("kind", [k.value for k in LossKind])
def test_every_loss_kind_trains(small_market, kind):
    report = train(small_market, quick(epochs=1, loss_kind=kind), TINY)
    assert len(report.loss_trace) == 1


def test_gradient_check_rules():
    with pytest.raises(ConfigError):
        gradient_check(TINY, epsilon=0.0)
    report = gradient_check(ModelConfig.tiny(), zero_params=True, max_entries=4)
    assert all(math.isfinite(v) for v in report.values())
    sampled = gradient_check(ModelConfig.tiny(), max_entries=3)
    assert max(sampled.values()) < 1e-4


def test_min_max_and_trailing_std():
    assert min_max([3.0, 1.0, 2.0]) == [1.0, 0.0, 0.5]
    assert min_max([2.0, 2.0]) == [0.0, 0.0]
    assert math.isnan(min_max([1.0, float("nan"), 0.0])[1])
    assert trailing_std([0.0] * 30 + [1.0, 0.0] * 10) == pytest.approx(np.std([1.0, 0.0] * 10, ddof=1))
    assert trailing_std([0.5] * 25 + [float("nan")]) == math.inf


def test_loss_comparison_contract(small_market):
    with pytest.raises(ConfigError):
        loss_comparison(small_market, ["mse"], 2, quick(), TINY)
    dup = loss_comparison(small_market, ["mse", "mse"], 2, quick(), TINY)
    assert dup[0].loss == dup[1].loss and dup[0].normalized == dup[1].normalized
    mixed = loss_comparison(small_market, ["mse", "cspo_final"], 3, quick(), TINY)
    assert [len(r.loss) for r in mixed] == [3, 3]
    for r in mixed:
        assert min(r.normalized) == 0.0 and max(r.normalized) == 1.0


@pytest.mark.slow
def test_planted_signal_is_recovered():
    data = MarketBundle(*synthesize_market(11, 700, 10, 5, 5, 4, 1.0))
    tr, ho = split_bundle(data, data.dates[560], 8)
    cfg = TrainConfig(epochs=50, batch_days=16, lookback_t=8, seed=0)
    report = train(tr, cfg, ModelConfig(d=32, enc_heads=4, bdp_heads=4, pv_heads=4), valid=ho)
    assert holdout_ic(report.model, ho, 8) >= 0.9
