"""Single-thread LeNet-5 forward timing for conv, TI1, TI2 and TI3, repeated.

Prints each repeat's report and the median speedups over all repeats.
"""

import argparse
import statistics

from fernnet.bench import bench, format_report, speedup


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--iterations", type=int, default=300)
    parser.add_argument("--batch", type=int, default=1)
    args = parser.parse_args()

    kinds = ("conv", "TI1", "TI2", "TI3")
    ratios = {k: [] for k in kinds[1:]}
    for _ in range(args.repeats):
        timings = bench(kinds, in_shape=(args.batch, 1, 28, 28), iterations=args.iterations)
        print(format_report(timings))
        for k in ratios:
            ratios[k].append(speedup(timings, f"lenet5-{k}"))
    for k, values in ratios.items():
        print(f"{k}: median speedup vs conv {statistics.median(values):.2f}x "
              f"(range {min(values):.2f} to {max(values):.2f})")


if __name__ == "__main__":
    main()
