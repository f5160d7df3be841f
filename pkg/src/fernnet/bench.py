"""Single-thread forward-pass timing of LeNet-5 variants.

The baseline is :mod:`fernnet.convref`'s direct loop, not a vendor library,
so only the direction and rough size of the fern speedup are meaningful.
"""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass

import numpy as np

from . import convref, fern
from .errors import ConfigError
from .fern import PatternSet
from .nn import Model, build_lenet5
from .parallel import get_threads, set_threads


@dataclass
class Timing:
    name: str
    median_ms: float
    iqr_ms: float
    samples: int
    counted: list  # per replaceable layer: (label, measured (m, a, c), predicted (m, a, c))

    @property
    def counters_match(self) -> bool:
        return all(measured == predicted for _, measured, predicted in self.counted)


def time_forward(model: Model, x: np.ndarray, iterations: int = 200, warmup: int = 20):
    """Median and interquartile range (ms) of ``model.forward(x)`` wall time."""
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    for _ in range(warmup):
        model.forward(x)
    samples = np.empty(iterations)
    enabled = gc.isenabled()
    gc.disable()
    try:
        for j in range(iterations):
            start = time.perf_counter_ns()
            model.forward(x)
            samples[j] = time.perf_counter_ns() - start
    finally:
        if enabled:
            gc.enable()
    q1, med, q3 = np.percentile(samples / 1e6, [25, 50, 75])
    return float(med), float(q3 - q1)


def count_ops(model: Model, x: np.ndarray):
    """Measured vs closed-form op counts of every conv/fern layer for one forward pass."""
    rows = []
    h = x
    for pos, layer in enumerate(model.layers):
        if layer.kind == "conv":
            layer.counters.reset()
            out = layer.forward(h)
            m, a = convref.predicted_ops(h.shape, layer.out_depth, layer.ky, layer.kx,
                                         layer.padding)
            rows.append((f"layer {pos} conv {h.shape[1]}->{layer.out_depth}",
                         layer.counters.as_tuple(), (m, a, 0)))
        elif layer.kind == "fern":
            layer.counters.reset()
            out = layer.forward(h)
            rows.append((f"layer {pos} fern {h.shape[1]}->{layer.out_depth}",
                         layer.counters.as_tuple(),
                         fern.predicted_ops(h.shape, layer.out_depth, layer.patterns,
                                            layer.padding)))
        else:
            out = layer.forward(h)
        h = out
    return rows


def bench(kinds=("conv", "TI2", "TI3"), patterns: PatternSet | None = None,
          in_shape=(1, 1, 28, 28), iterations: int = 200, warmup: int = 20,
          threads: int = 1, seed: int = 0) -> list[Timing]:
    previous = get_threads()
    set_threads(threads)
    try:
        rng = np.random.default_rng(seed)
        x = rng.random(in_shape, dtype=np.float32)
        timings = []
        for kind in kinds:
            model = build_lenet5(kind, np.random.default_rng(seed), in_shape=in_shape[1:],
                                 patterns=patterns if kind != "conv" else None)
            med, iqr = time_forward(model, x, iterations, warmup)
            timings.append(Timing(model.name, med, iqr, iterations, count_ops(model, x)))
        return timings
    finally:
        set_threads(previous)


def speedup(timings: list[Timing], kind: str, baseline: str = "lenet5-conv") -> float:
    by_name = {t.name: t for t in timings}
    return by_name[baseline].median_ms / by_name[kind].median_ms


def format_report(timings: list[Timing], threads: int = 1) -> str:
    lines = [f"forward pass, {threads} thread(s); baseline = direct-loop convolution "
             f"(not CUDNN)"]
    base = next((t for t in timings if t.name == "lenet5-conv"), None)
    for t in timings:
        ratio = f"  speedup vs conv {base.median_ms / t.median_ms:5.2f}x" if base else ""
        lines.append(f"{t.name:<16s} median {t.median_ms:8.4f} ms  iqr {t.iqr_ms:7.4f} ms"
                     f"  n={t.samples}{ratio}")
        for label, measured, predicted in t.counted:
            flag = "ok" if measured == predicted else "MISMATCH"
            lines.append(f"    {label:<24s} mults {measured[0]:>9d} adds {measured[1]:>9d} "
                         f"cmps {measured[2]:>7d} | predicted {predicted[0]:>9d} "
                         f"{predicted[1]:>9d} {predicted[2]:>7d}  {flag}")
    return "\n".join(lines)
