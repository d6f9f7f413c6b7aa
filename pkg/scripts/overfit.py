"""Overfit the toy network on one synthetic image and report per-class DSC.

    python scripts/overfit.py --steps 300 --lr 0.05 --seed 0
"""

import argparse
import time

from tcsaformer.config import TrainConfig, toy_config
from tcsaformer.experiments import run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=TrainConfig.steps)
    ap.add_argument("--lr", type=float, default=TrainConfig.lr)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mode", default="prune_and_merge")
    ap.add_argument("--every", type=int, default=25, help="print the loss every N steps")
    args = ap.parse_args()

    cfg = toy_config(seed=args.seed).with_mode(args.mode)
    t0 = time.perf_counter()
    report = run_overfit(cfg, TrainConfig(lr=args.lr, steps=args.steps),
                         log=lambda i, v: print(f"step {i:4d}  loss {v:.6f}") if i % args.every == 0 else None)
    print(f"final loss {report.losses[-1]:.6f}")
    print("dsc " + " ".join(f"{d:.4f}" for d in report.dsc))
    print(f"mean_dsc {report.mean_dsc:.4f}  miou {report.miou:.4f}  ({time.perf_counter() - t0:.1f}s)")


if __name__ == "__main__":
    main()
