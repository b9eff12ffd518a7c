"""Meta-train the desk configuration for 20k steps into artifacts/desk/.

The acceptance tests reuse ``artifacts/desk/latest.mnck`` when it exists.
"""

import argparse
import json
import logging
import os
import sys

import torch

from mothernet.encoder import PRESETS
from mothernet.prior import PriorConfig
from mothernet.train import TrainConfig, train

HERE = os.path.dirname(os.path.abspath(__file__))


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--batches", default="64,128,256", help="batch sizes for the three equal thirds of training")
    ap.add_argument("--out", default=os.path.join(HERE, "..", "artifacts", "desk"))
    args = ap.parse_args(argv)
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    sizes = [int(b) for b in args.batches.split(",")]
    third = args.steps // len(sizes)
    schedule = tuple((i * third, b) for i, b in enumerate(sizes))
    cfg = TrainConfig(total_steps=args.steps, base_lr=args.lr, seed=args.seed, batch_schedule=schedule)
    _, records = train(cfg, PriorConfig(), PRESETS["desk"], out_dir=args.out)
    json.dump({"steps": len(records), "final_loss": records[-1]["loss"]}, sys.stdout)
    print()


if __name__ == "__main__":
    main()
