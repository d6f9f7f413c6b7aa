"""MAC counts of the full-size network per compression mode and input size.

Counts use 1 MAC = 1 FLOP. Multiply by two for 2-ops-per-MAC figures.
"""

import argparse

from tcsaformer.compression import MODES
from tcsaformer.config import default_config
from tcsaformer.flops import count_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[224, 256, 512])
    ap.add_argument("--classes", type=int, default=9)
    args = ap.parse_args()
    print(f"{'size':>5} {'mode':<16} {'GMACs':>8} {'reduction':>10}")
    for size in args.sizes:
        for mode in MODES:
            rep = count_model(default_config(size, size, args.classes).with_mode(mode))
            print(f"{size:>5} {mode:<16} {rep.total / 1e9:>8.3f} {100 * rep.reduction:>9.2f}%")


if __name__ == "__main__":
    main()
