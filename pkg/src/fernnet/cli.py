"""Command line: ``fernnet {train,eval,bench,gradcheck}``.

Exit codes: 0 success, 1 usage/configuration, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, DataError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _shape(value: str):
    try:
        dims = tuple(int(v) for v in value.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected HxWxC, e.g. 28x28x1") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError("expected HxWxC, e.g. 28x28x1")
    return dims


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fernnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train LeNet-5 on MNIST")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--preset", default="desk", choices=("desk", "long"))
    t.add_argument("--data-dir")
    t.add_argument("--model", choices=("conv", "TI1", "TI2", "TI3"))
    t.add_argument("--pattern-file")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--noise", type=float)
    t.add_argument("--test-limit", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--heuristic-bp", type=_on_off, metavar="{on,off}")
    t.add_argument("--out")

    e = sub.add_parser("eval", help="test accuracy of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data-dir", default="data/mnist")
    e.add_argument("--split", default="test", choices=("train", "test"))

    b = sub.add_parser("bench", help="single-thread forward timing vs direct conv")
    b.add_argument("--model", action="append", choices=("conv", "TI1", "TI2", "TI3"),
                   help="repeatable; default conv, TI2, TI3")
    b.add_argument("--pattern-file")
    b.add_argument("--input", type=_shape, default=(28, 28, 1), metavar="HxWxC")
    b.add_argument("--iterations", type=int, default=200)
    b.add_argument("--warmup", type=int, default=20)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gradcheck", help="finite-difference and adjoint checks")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=int, default=3)
    return parser


def cmd_train(args) -> int:
    from .train import load_config, train

    cfg = load_config(args.config, args.preset, data_dir=args.data_dir, model=args.model,
                      pattern_file=args.pattern_file, seed=args.seed, epochs=args.epochs,
                      steps_per_epoch=args.steps_per_epoch, lr=args.lr, batch=args.batch,
                      noise=args.noise, test_limit=args.test_limit, threads=args.threads,
                      heuristic_bp=args.heuristic_bp, out=args.out)
    result = train(cfg)
    print(f"best test accuracy {result.best_acc:.4f} at epoch {result.best_epoch}; "
          f"outputs in {result.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint

    acc, correct, total = evaluate_checkpoint(args.checkpoint, args.data_dir, args.split)
    print(f"accuracy {acc:.4f} ({correct}/{total})")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench, format_report
    from .fern import load_patterns

    if args.iterations < 1:
        raise ConfigError("--iterations must be >= 1")
    kinds = args.model or ["conv", "TI2", "TI3"]
    if args.pattern_file and kinds == ["conv"]:
        raise ConfigError("--pattern-file needs a fern model")
    patterns = load_patterns(args.pattern_file) if args.pattern_file else None
    h, w, c = args.input
    timings = bench(kinds, patterns, (1, c, h, w), args.iterations, args.warmup,
                    args.threads, args.seed)
    print(format_report(timings, args.threads))
    return EXIT_OK if all(t.counters_match for t in timings) else EXIT_NUMERIC


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all, summarize

    results = summarize(run_all(args.seed, args.instances))
    for res in results:
        print(res.line())
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train"
                        else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"fernnet: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"fernnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"fernnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
