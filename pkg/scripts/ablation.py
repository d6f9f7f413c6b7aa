"""Compression-mode sweep at toy scale: tokens per stage, MACs, output drift vs mode=none."""

import argparse

from tcsaformer.config import toy_config
from tcsaformer.experiments import ablation_sweep, format_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=int, default=64, help="square input side, a multiple of 32")
    args = ap.parse_args()
    print(format_ablation(ablation_sweep(toy_config(args.size, args.size, seed=args.seed))), end="")


if __name__ == "__main__":
    main()
