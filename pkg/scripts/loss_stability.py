"""Multi-seed loss-curve stability study across objective kinds.

Reports the trailing-20 std of each min-max normalized loss trace per seed,
plus when (if ever) the run produced a non-finite loss.

    python3 scripts/loss_stability.py --seeds 0,1,2 --kinds cspo_final,hetero_raw
"""

import argparse
from pathlib import Path

import pandas as pd
import torch

from cspo.data import MarketBundle, synthesize_market
from cspo.model import ModelConfig
from cspo.trainer import TrainConfig, loss_comparison, split_bundle, trailing_std


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--kinds", default="mse,hetero_raw,hetero_exp,hetero_reg,cspo_final")
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--batch-days", type=int, default=16)
    ap.add_argument("--t", type=int, default=360)
    ap.add_argument("--out", type=Path, default=Path("runs/loss_stability.csv"))
    args = ap.parse_args()
    torch.set_num_threads(1)

    data = MarketBundle(*synthesize_market(1, args.t, 8, 4, 4, 4, 0.9))
    tr, ho = split_bundle(data, data.dates[int(args.t * 5 / 6)], 6)
    model_config = ModelConfig(d=16, enc_heads=2, bdp_heads=2, pv_heads=2)
    kinds = args.kinds.split(",")

    rows = []
    for seed in map(int, args.seeds.split(",")):
        cfg = TrainConfig(lookback_t=6, batch_days=args.batch_days, seed=seed)
        for run in loss_comparison(tr, kinds, args.epochs, cfg, model_config, valid=ho):
            rows.append(dict(seed=seed, kind=run.kind.value, trailing_std=trailing_std(run.normalized),
                             diverged_epoch=run.diverged_epoch, final_ic=run.ic[-1]))
            print(rows[-1], flush=True)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame(rows)
    table.to_csv(args.out, index=False)
    print(table.pivot(index="seed", columns="kind", values="trailing_std"))


if __name__ == "__main__":
    main()
