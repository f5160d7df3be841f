"""Finite-difference and adjoint checks for the layers and a small model.

All checks run in float64.  Fern inputs are drawn so that no comparison is
within ``margin`` of a tie, which keeps every index fixed under the
finite-difference step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convref import ConvLayer
from .fern import FernLayer, PatternSet, builtin_pattern
from .nn import Dense, Flatten, MaxPool2x2, Model, softmax_cross_entropy
from .tensor import DTYPE64, zero_pad

STEP = 1e-4
MARGIN = 1e-3
TOLERANCE = 1e-3
ADJOINT_TOLERANCE = 1e-4
# denominators below this are treated as this, so exact zeros compare cleanly
REL_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, REL_FLOOR)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def tie_margin(x: np.ndarray, patterns: PatternSet, padding: str = "same") -> float:
    """Smallest |centre - neighbour| over every comparison the layer makes."""
    r = patterns.radius
    xp = zero_pad(x, r) if padding == "same" else x
    h, w = xp.shape[2] - 2 * r, xp.shape[3] - 2 * r
    if h <= 0 or w <= 0:
        return np.inf
    center = xp[:, :, r:r + h, r:r + w]
    best = np.inf
    for p in patterns.patterns:
        for dy, dx in p.offsets:
            nb = xp[:, :, r + dy:r + dy + h, r + dx:r + dx + w]
            best = min(best, float(np.min(np.abs(center - nb))))
    return best


def margin_filtered_input(rng: np.random.Generator, shape, patterns: PatternSet,
                          margin: float = MARGIN, padding: str = "same",
                          attempts: int = 1000) -> np.ndarray:
    """Uniform(-1, 1) input whose comparisons all clear ``margin``."""
    for _ in range(attempts):
        x = rng.uniform(-1.0, 1.0, size=shape)
        if tie_margin(x, patterns, padding) > margin:
            return x
    raise RuntimeError(f"no input of shape {shape} clears margin {margin}")


def _numeric(f, array: np.ndarray, step: float = STEP) -> np.ndarray:
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        keep = flat[j]
        flat[j] = keep + step
        up = f()
        flat[j] = keep - step
        down = f()
        flat[j] = keep
        out[j] = (up - down) / (2 * step)
    return grad


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        return (f"{'PASS' if self.ok else 'FAIL'}  {self.name:<28s} "
                f"max rel err {self.error:.3e} (< {self.tolerance:g})")


def check_fern(rng: np.random.Generator, patterns: PatternSet | None = None,
               shape=(2, 2, 5, 5), out_depth: int = 3, padding: str = "same"):
    """Weight, bias and input gradients of a fern layer against central differences.

    Loss is ``sum(err * forward(x))`` with a fixed random ``err``; the
    comparison-participant heuristic is off so the analytic gradient is exact.
    """
    patterns = patterns or builtin_pattern("TI1")
    layer = FernLayer.create(shape[1], out_depth, patterns, rng, padding=padding,
                             heuristic=False, dtype=DTYPE64)
    layer.bias[...] = rng.uniform(-1, 1, size=layer.bias.shape)
    x = margin_filtered_input(rng, shape, patterns, padding=padding)
    err = rng.uniform(-1, 1, size=layer.output_shape(shape))

    def loss():
        return float(np.sum(err * layer.forward(x)))

    layer.forward(x)
    gin = layer.backward(err)
    g_table, g_bias = layer.grad_table.copy(), layer.grad_bias.copy()
    return [
        CheckResult(f"fern {patterns.name} weights", rel_error(g_table, _numeric(loss, layer.table)),
                    TOLERANCE),
        CheckResult(f"fern {patterns.name} bias", rel_error(g_bias, _numeric(loss, layer.bias)),
                    TOLERANCE),
        CheckResult(f"fern {patterns.name} input", rel_error(gin, _numeric(loss, x)), TOLERANCE),
    ]


def check_conv(rng: np.random.Generator, shape=(2, 2, 5, 5), out_depth: int = 3,
               k: int = 3, padding: str = "same"):
    layer = ConvLayer.create(shape[1], out_depth, k, k, rng, padding=padding, dtype=DTYPE64)
    layer.bias[...] = rng.uniform(-1, 1, size=layer.bias.shape)
    x = rng.uniform(-1, 1, size=shape)
    err = rng.uniform(-1, 1, size=layer.output_shape(shape))

    def loss():
        return float(np.sum(err * layer.forward(x)))

    layer.forward(x)
    gin = layer.backward(err)
    g_w, g_b = layer.grad_weights.copy(), layer.grad_bias.copy()
    results = [
        CheckResult("conv weights", rel_error(g_w, _numeric(loss, layer.weights)), TOLERANCE),
        CheckResult("conv bias", rel_error(g_b, _numeric(loss, layer.bias)), TOLERANCE),
        CheckResult("conv input", rel_error(gin, _numeric(loss, x)), TOLERANCE),
    ]
    results.append(CheckResult("conv adjoint identity", adjoint_gap(layer, x, err),
                               ADJOINT_TOLERANCE))
    return results


def adjoint_gap(layer: ConvLayer, x: np.ndarray, y: np.ndarray) -> float:
    """Relative gap between <conv(x), y> and <x, conv^T(y)>, bias excluded."""
    probe = layer.astype(DTYPE64)
    probe.bias[...] = 0
    lhs = float(np.sum(probe.forward(x) * y))
    rhs = float(np.sum(x * probe.backward(y)))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), REL_FLOOR)


def tiny_model(rng: np.random.Generator, classes: int = 3) -> Model:
    """Fern TI1 1->2, 2x2 max pool, flatten, dense -> 3 (float64, exact backprop)."""
    fern = FernLayer.create(1, 2, builtin_pattern("TI1"), rng, heuristic=False, dtype=DTYPE64)
    fern.bias[...] = rng.uniform(-0.5, 0.5, size=2)
    dense = Dense.create(2 * 3 * 3, classes, rng, dtype=DTYPE64)
    dense.bias[...] = rng.uniform(-0.5, 0.5, size=classes)
    return Model([fern, MaxPool2x2(), Flatten(), dense], "tiny")


def _pool_margin(out: np.ndarray) -> float:
    n, c, h, w = out.shape
    win = np.sort(out.reshape(n, c, h // 2, 2, w // 2, 2)
                  .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4), axis=-1)
    return float(np.min(win[..., -1] - win[..., -2]))


def check_model(rng: np.random.Generator, batch: int = 2, attempts: int = 200):
    """Whole-model loss gradient for every parameter against central differences."""
    patterns = builtin_pattern("TI1")
    for _ in range(attempts):
        model = tiny_model(rng)
        x = margin_filtered_input(rng, (batch, 1, 6, 6), patterns)
        labels = rng.integers(0, 3, size=batch)
        # pooled maxima must stay put under the step as well
        if _pool_margin(model.layers[0].forward(x)) > MARGIN:
            break
    else:
        raise RuntimeError("could not draw a tie-free model instance")

    def loss():
        return softmax_cross_entropy(model.forward(x), labels)[0]

    model.loss_and_grads(x, labels)
    analytic = [g.copy() for g in model.grads()]
    results = []
    names = ["fern weights", "fern bias", "dense weights", "dense bias"]
    for name, param, grad in zip(names, model.params(), analytic):
        results.append(CheckResult(f"model {name}", rel_error(grad, _numeric(loss, param)),
                                   TOLERANCE))
    return results


def run_all(seed: int = 0, instances: int = 3):
    """Every gradient check; returns the list of :class:`CheckResult`."""
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(instances):
        for name in ("TI1", "TI2", "TI3"):
            results += check_fern(rng, builtin_pattern(name), shape=(2, 2, 6, 6))
        results += check_conv(rng)
        results += check_model(rng)
    return results


def summarize(results):
    """Worst result per check name, in first-seen order."""
    worst = {}
    for res in results:
        if res.name not in worst or res.error > worst[res.name].error:
            worst[res.name] = res
    return list(worst.values())
