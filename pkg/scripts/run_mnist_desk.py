"""Desk-scale MNIST comparison: LeNet-5 with TI2 ferns vs 5x5 convolutions.

Trains both with the desk preset and prints the best test accuracy of each
and their gap.  Extra ``key=value`` arguments override the config.
"""

import argparse
import logging

from fernnet.train import load_config, train


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data-dir", default="data/mnist")
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--models", nargs="+", default=["TI2", "conv"])
    parser.add_argument("overrides", nargs="*", help="key=value config overrides")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    extra = dict(item.split("=", 1) for item in args.overrides)
    best = {}
    for kind in args.models:
        cfg = load_config(None, "desk", model=kind, data_dir=args.data_dir,
                          out=f"{args.out}/{kind}", **extra)
        result = train(cfg)
        best[kind] = result.best_acc
        print(f"{kind:5s} best test accuracy {result.best_acc:.4f} (epoch {result.best_epoch})")
    if len(best) == 2:
        a, b = best.values()
        print(f"gap {100 * abs(a - b):.2f} percentage points")


if __name__ == "__main__":
    main()
