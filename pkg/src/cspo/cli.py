"""``cspo`` command line: data generation, training, prediction, evaluation, backtests, experiments."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from . import data as md
from .backtest import StrategyConfig, portfolio_metrics, run_backtest
from .checkpoint import atomic_write_bytes
from .errors import CSPOError, ConfigError, DataError, NumericalError
from .metrics import DailyPanel, summarize
from .model import ABLATIONS, CSPOModel, ModelConfig
from .objective import LossKind
from .trainer import TrainConfig, Windows, gradient_check, loss_comparison, predict, split_bundle, train, trailing_std

logger = logging.getLogger("cspo")

COMMANDS = ("gen-data", "train", "predict", "evaluate", "backtest", "ablate", "loss-compare", "grad-check")
RUN_KEYS = {"data_dir", "out_dir", "boundary", "train_fraction"}
GRAD_TOL = 1e-4


class Run:
    """Collects inputs and artifacts for the run manifest."""

    def __init__(self, command: str, args: dict):
        self.command = command
        self.args = args
        self.seed = args.get("seed")
        self.inputs: dict[str, str] = {}
        self.artifacts: list[str] = []
        self.config: dict = {}
        self.started = time.perf_counter()

    def input(self, path):
        path = Path(path)
        if path.is_file():
            self.inputs[str(path)] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def artifact(self, path):
        self.artifacts.append(str(path))
        return Path(path)

    def manifest(self) -> dict:
        blob = json.dumps({"args": self.args, "config": self.config}, sort_keys=True, default=str).encode()
        return {
            "command": self.command,
            "config_hash": hashlib.sha256(blob).hexdigest(),
            "seed": self.seed,
            "input_digests": self.inputs,
            "artifacts": self.artifacts,
            "wall_clock": time.perf_counter() - self.started,
        }


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(path, payload) -> None:
    text = json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def load_run_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a flat JSON object")
    known = RUN_KEYS | {f.name for f in dataclasses.fields(TrainConfig)} | {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    try:
        raw["train"] = TrainConfig.from_dict(raw)
        raw["model"] = ModelConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CSPOError):
            raise
        raise ConfigError(str(exc)) from exc
    return raw


def _boundary(bundle: md.MarketBundle, cfg: dict) -> str:
    if cfg.get("boundary"):
        return str(cfg["boundary"])
    frac = float(cfg.get("train_fraction", 0.8))
    if not 0.0 < frac < 1.0:
        raise ConfigError("train_fraction must lie in (0, 1)")
    return bundle.dates[int(round(frac * bundle.t))]


def write_predictions(preds, path, emit_volatility=False) -> None:
    t, k = preds.r_hat.shape
    frame = pd.DataFrame(
        {
            "date": np.repeat(np.array(preds.dates, dtype=object), k),
            "asset_id": np.tile(np.array(preds.asset_ids, dtype=object), t),
            "r_hat": preds.r_hat.reshape(-1),
        }
    )
    if emit_volatility and preds.gamma is not None:
        frame["gamma"] = preds.gamma.reshape(-1)
    frame.to_csv(path, index=False, lineterminator="\n")


def _plot(path, series: dict, title: str, ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for label, values in series.items():
        ax.plot(np.arange(len(values)), values, label=label)
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _data_bundle(data_dir, run: Run) -> md.MarketBundle:
    data_dir = Path(data_dir)
    for name in ("stock.csv", "commodity.csv", "financial.csv", "prices.csv"):
        run.input(data_dir / name)
    return md.load_market_dir(data_dir)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, run: Run) -> int:
    market = md.synthesize_market(args.seed, args.t, args.ks, args.kc, args.ke, args.dprime, args.signal)
    paths = md.write_market_dir(market, args.out)
    for p in paths.values():
        run.artifact(p)
    loadings = Path(args.out) / "loadings.json"
    write_json(
        loadings,
        {
            "signal_strength": market.signal_strength,
            "commodity_loadings": market.commodity_loadings.tolist(),
            "financial_loadings": market.financial_loadings.tolist(),
        },
    )
    run.artifact(loadings)
    print(json.dumps({"out": str(args.out), "dates": market.stock.t}))
    return 0


def _train_once(cfg: dict, run: Run, out_dir: Path, train_cfg=None, tag="") -> dict:
    torch.set_num_threads(1)
    train_cfg = train_cfg or cfg["train"]
    full = _data_bundle(cfg["data_dir"], run)
    boundary = _boundary(full, cfg)
    train_part, holdout = split_bundle(full, boundary, train_cfg.lookback_t)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run.artifact(out_dir / f"model{tag}.ckpt")
    meta = {"lookback_t": train_cfg.lookback_t, "train": train_cfg.to_dict(), "boundary": boundary}
    report = train(train_part, train_cfg, cfg["model"], valid=holdout, checkpoint_path=ckpt, extra_meta=meta)
    preds = predict(report.model, holdout, train_cfg.lookback_t)
    write_predictions(preds, run.artifact(out_dir / f"preds{tag}.csv"))
    trace = pd.DataFrame({"epoch": np.arange(1, len(report.loss_trace) + 1), "loss": report.loss_trace, "val_ic": report.val_ic_trace})
    trace.to_csv(run.artifact(out_dir / f"train_trace{tag}.csv"), index=False, lineterminator="\n")
    _plot(run.artifact(out_dir / f"train_trace{tag}.png"), {"loss": report.loss_trace, "val_ic": report.val_ic_trace}, "training", "value")
    summary = summarize(_panel_from_bundle(report.model, holdout, train_cfg.lookback_t))
    summary.update({"checkpoint_id": report.checkpoint_id, "boundary": boundary, "ablation": sorted(train_cfg.ablation)})
    return summary


def _panel_from_bundle(model, holdout, lookback) -> DailyPanel:
    preds = predict(model, holdout, lookback, need_target=True)
    w = Windows(holdout, lookback)
    return DailyPanel.from_matrix(preds.r_hat, w.targets[w.anchors()], preds.dates)


def cmd_train(args, run: Run) -> int:
    cfg = load_run_config(run.input(args.config))
    run.config, run.seed = {k: v for k, v in cfg.items() if k not in ("train", "model")}, cfg["train"].seed
    out_dir = Path(cfg.get("out_dir") or "cspo_run")
    summary = _train_once(cfg, run, out_dir)
    write_json(run.artifact(out_dir / "report.json"), summary)
    print(json.dumps(_clean(summary), sort_keys=True))
    return 0


def cmd_ablate(args, run: Run) -> int:
    cfg = load_run_config(run.input(args.config))
    run.config, run.seed = {k: v for k, v in cfg.items() if k not in ("train", "model")}, cfg["train"].seed
    flags = frozenset(f for f in args.flags.split(",") if f)
    if not flags <= ABLATIONS:
        raise ConfigError(f"unknown ablation flags {sorted(flags - ABLATIONS)}")
    base = cfg["train"]
    ablated = dataclasses.replace(
        base, ablation=flags, loss_kind=LossKind.MSE if "no_pv" in flags else base.loss_kind
    )
    out_dir = Path(cfg.get("out_dir") or "cspo_run") / ("ablate_" + "_".join(sorted(flags)))
    full = _train_once(cfg, run, out_dir, base, tag="_full")
    variant = _train_once(cfg, run, out_dir, ablated, tag="_ablated")
    result = {"full": full, "ablated": variant, "flags": sorted(flags)}
    write_json(run.artifact(out_dir / "ablation.json"), result)
    print(json.dumps(_clean({"full_ic": full["ic"], "ablated_ic": variant["ic"], "flags": sorted(flags)})))
    return 0


def cmd_predict(args, run: Run) -> int:
    model, meta = CSPOModel.load(run.input(args.ckpt))
    bundle = _data_bundle(args.data, run)
    preds = predict(model, bundle, int(meta["lookback_t"]), emit_volatility=args.emit_volatility)
    if args.emit_volatility and preds.gamma is None:
        raise ConfigError("checkpoint has no pseudo-volatility estimator (trained with no_pv)")
    write_predictions(preds, run.artifact(args.out), args.emit_volatility)
    return 0


def _read_long(path, value_col):
    frame = pd.read_csv(path, dtype={"date": str, "asset_id": str}, float_precision="round_trip")
    if frame.empty:
        raise md.EmptyFile(f"{path} has no rows")
    missing = {"date", "asset_id", value_col} - set(frame.columns)
    if missing:
        raise DataError(f"{path} lacks columns {sorted(missing)}")
    frame["date"] = md._normalize_dates(frame["date"])
    return frame.pivot(index="date", columns="asset_id", values=value_col).sort_index()


def _aligned(preds_path, prices_path):
    preds = _read_long(preds_path, "r_hat")
    prices = _read_long(prices_path, "price")
    if (prices <= 0).any().any():
        raise md.NonPositivePrice("prices must be positive")
    realized = (prices.shift(-1) / prices - 1.0).iloc[:-1]
    dates = preds.index.intersection(realized.index)
    assets = preds.columns.intersection(realized.columns)
    if len(dates) == 0 or len(assets) == 0:
        raise DataError("predictions and prices share no (date, asset) cells")
    return preds.loc[dates, assets], realized.loc[dates, assets]


def cmd_evaluate(args, run: Run) -> int:
    preds, realized = _aligned(run.input(args.preds), run.input(args.prices))
    days_p, days_r, dates = [], [], []
    for date in preds.index:
        ok = preds.loc[date].notna() & realized.loc[date].notna()
        days_p.append(preds.loc[date][ok].to_numpy())
        days_r.append(realized.loc[date][ok].to_numpy())
        dates.append(date)
    report = summarize(DailyPanel(days_p, days_r, dates))
    if args.out:
        write_json(run.artifact(args.out), report)
    print(json.dumps(_clean(report), sort_keys=True))
    return 0


def cmd_backtest(args, run: Run) -> int:
    preds, realized = _aligned(run.input(args.preds), run.input(args.prices))
    index_dates, index_values = md.load_index_csv(run.input(args.index))
    index = pd.Series(index_values, index=list(index_dates))
    dates = [d for d in preds.index if d in index.index]
    if preds.loc[dates].isna().any().any() or realized.loc[dates].isna().any().any():
        raise DataError("backtest needs dense predictions and prices over the common dates")
    config = StrategyConfig(args.top_fraction, args.hedged, args.cost_bps, args.trading_days, args.risk_free)
    ledger = run_backtest(
        preds.loc[dates].to_numpy(), realized.loc[dates].to_numpy(), index.loc[dates].to_numpy(),
        config, tuple(preds.columns), tuple(dates),
    )
    report = portfolio_metrics(ledger, config)
    report.update({"hedged": args.hedged, "n_days": len(dates)})
    write_json(run.artifact(args.out), report)
    out = Path(args.out)
    curve = pd.DataFrame({"date": ["start"] + dates, "equity": ledger.equity})
    curve.to_csv(run.artifact(out.with_suffix(".equity.csv")), index=False, lineterminator="\n")
    _plot(run.artifact(out.with_suffix(".equity.png")), {"hedged" if args.hedged else "spot": ledger.equity}, "equity curve", "equity")
    print(json.dumps(_clean(report), sort_keys=True))
    return 0


def cmd_loss_compare(args, run: Run) -> int:
    torch.set_num_threads(1)
    kinds = [LossKind(k) for k in args.kinds.split(",") if k]
    if args.config:
        cfg = load_run_config(run.input(args.config))
        full = _data_bundle(cfg["data_dir"], run)
        train_cfg, model_cfg, boundary = cfg["train"], cfg["model"], _boundary(full, cfg)
        out_dir = Path(args.out or cfg.get("out_dir") or "cspo_run")
    else:
        full = md.bundle(md.synthesize_market(args.seed, 360, 8, 4, 4, 4, 0.9))
        train_cfg = TrainConfig(seed=args.seed, lookback_t=6)
        model_cfg = ModelConfig(d=16, enc_heads=2, bdp_heads=2, pv_heads=2)
        boundary = full.dates[300]
        out_dir = Path(args.out or "cspo_loss_compare")
    run.seed = train_cfg.seed
    train_part, holdout = split_bundle(full, boundary, train_cfg.lookback_t)
    results = loss_comparison(train_part, kinds, args.epochs, train_cfg, model_cfg, valid=holdout)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, r in enumerate(results):
        for epoch, (raw, norm, ic_) in enumerate(zip(r.loss, r.normalized, r.ic), start=1):
            rows.append({"run": i, "kind": r.kind.value, "epoch": epoch, "loss": raw, "normalized_loss": norm, "val_ic": ic_})
    pd.DataFrame(rows).to_csv(run.artifact(out_dir / "loss_compare.csv"), index=False, lineterminator="\n")
    labels = [f"{r.kind.value}#{i}" for i, r in enumerate(results)]
    _plot(run.artifact(out_dir / "loss_compare_loss.png"), {l: r.normalized for l, r in zip(labels, results)}, "normalized loss", "min-max loss")
    _plot(run.artifact(out_dir / "loss_compare_ic.png"), {l: r.ic for l, r in zip(labels, results)}, "validation IC", "IC")
    summary = {l: {"trailing_std": trailing_std(r.normalized), "final_ic": r.ic[-1], "diverged_epoch": r.diverged_epoch} for l, r in zip(labels, results)}
    write_json(run.artifact(out_dir / "loss_compare.json"), summary)
    print(json.dumps(_clean(summary), sort_keys=True))
    return 0


def cmd_grad_check(args, run: Run) -> int:
    torch.set_num_threads(1)
    report = gradient_check(ModelConfig.tiny(args.d), args.epsilon, args.seed, max_entries=args.max_entries)
    worst = max(report.values())
    print(f"max relative error {worst:.3e} over {len(report)} parameter tensors")
    if args.out:
        write_json(run.artifact(args.out), {"max_relative_error": worst, "per_tensor": report})
    if not worst < GRAD_TOL:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {GRAD_TOL}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cspo", description=__doc__)
    parser.add_argument("--manifest", help="where to write the run manifest (default: next to outputs)")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    p = sub.add_parser("gen-data", help="write a synthetic market with a planted futures signal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t", type=int, default=1500)
    p.add_argument("--ks", type=int, default=10)
    p.add_argument("--kc", type=int, default=5)
    p.add_argument("--ke", type=int, default=5)
    p.add_argument("--dprime", type=int, default=4)
    p.add_argument("--signal", type=float, default=0.9)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on a data directory described by a JSON config")
    p.add_argument("--config", required=True)

    p = sub.add_parser("predict", help="forecast next-day returns from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-volatility", action="store_true")

    p = sub.add_parser("evaluate", help="IC / rank IC report for a predictions file")
    p.add_argument("--preds", required=True)
    p.add_argument("--prices", required=True)
    p.add_argument("--out")

    p = sub.add_parser("backtest", help="daily-rebalanced top-basket backtest")
    p.add_argument("--preds", required=True)
    p.add_argument("--prices", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--hedged", action="store_true")
    p.add_argument("--top-fraction", type=float, default=0.1)
    p.add_argument("--cost-bps", type=float, default=0.0)
    p.add_argument("--trading-days", type=int, default=252)
    p.add_argument("--risk-free", type=float, default=0.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train the full model and an ablated variant")
    p.add_argument("--config", required=True)
    p.add_argument("--flags", required=True, help=f"comma separated subset of {sorted(ABLATIONS)}")

    p = sub.add_parser("loss-compare", help="train once per loss kind and compare traces")
    p.add_argument("--kinds", default="mse,hetero_raw,hetero_exp,hetero_reg,cspo_final")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("grad-check", help="finite-difference check of the composed loss")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=None)
    p.add_argument("--out")
    return parser


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "backtest": cmd_backtest,
    "ablate": cmd_ablate,
    "loss-compare": cmd_loss_compare,
    "grad-check": cmd_grad_check,
}


def _manifest_path(args, command: str) -> Path:
    if args.manifest:
        return Path(args.manifest)
    for attr in ("out",):
        value = getattr(args, attr, None)
        if value:
            target = Path(value)
            base = target if command in ("gen-data", "loss-compare") else target.parent
            return base / f"{command}.manifest.json"
    return Path(f"{command}.manifest.json")


def _configure_logging():
    level = os.environ.get("CSPO_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def dispatch(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    run = Run(args.command, {k: v for k, v in vars(args).items() if k != "manifest"})
    code = 0
    try:
        code = HANDLERS[args.command](args, run)
    except CSPOError as exc:
        code = exc.exit_code
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    finally:
        manifest = run.manifest()
        manifest["exit_code"] = code
        if args.command in ("train", "ablate") and code == 0 and run.config.get("out_dir"):
            path = Path(args.manifest) if args.manifest else Path(run.config["out_dir"]) / f"{args.command}.manifest.json"
        else:
            path = _manifest_path(args, args.command)
        try:
            write_json(path, manifest)
        except OSError as exc:
            logger.error("could not write manifest %s: %s", path, exc)
    return code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
