"""Direct-loop convolution layer, the baseline the fern layer replaces.

Cross-correlation (no kernel flip), stride 1, with the same zero padding
as :mod:`fernnet.fern`.  No im2col, FFT or Winograd: one multiply-add per
(output position, output layer, input depth, kernel tap).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import prange

from .errors import ConfigError
from .fern import PADDINGS, OpCounter, _reduce
from .parallel import CHUNK, kernel
from .tensor import DTYPE, Tensor, pad2d


def param_count(in_depth: int, out_depth: int, ky: int, kx: int) -> int:
    return in_depth * ky * kx * out_depth + out_depth


def predicted_ops(in_shape, out_depth: int, ky: int, kx: int, padding: str = "same"):
    """``(mults, adds)`` = t_x * t_y * t_z * n * c_x * c_y for one forward call."""
    n, z, h, w = in_shape
    if padding == "valid":
        h, w = max(h - ky + 1, 0), max(w - kx + 1, 0)
    macs = n * h * w * z * out_depth * ky * kx
    return macs, macs


def _forward_impl(xp, w, bias, ho, wo, out, counts):
    N, z = xp.shape[0], xp.shape[1]
    L, ky, kx = w.shape[0], w.shape[2], w.shape[3]
    for n in prange(N):
        nmac = 0
        nbias = 0
        for l in range(L):
            for y in range(ho):
                for x in range(wo):
                    out[n, l, y, x] = bias[l]
                    nbias += 1
            for i in range(z):
                for a in range(ky):
                    for c in range(kx):
                        wv = w[l, i, a, c]
                        for y in range(ho):
                            for x in range(wo):
                                out[n, l, y, x] += wv * xp[n, i, y + a, x + c]
                                nmac += 1
        counts[n, 0] = nmac
        counts[n, 1] = nmac
        counts[n, 3] = nbias


def _backward_impl(xp, w, err, need_input, chunk, gin, gw, gb):
    N, z = xp.shape[0], xp.shape[1]
    L, ky, kx = w.shape[0], w.shape[2], w.shape[3]
    ho, wo = err.shape[2], err.shape[3]
    for c in prange(gw.shape[0]):
        # row accumulator: keeps the inner loops free of scalar reductions
        racc = np.empty(wo, dtype=gw.dtype)
        for n in range(c * chunk, min(N, (c + 1) * chunk)):
            for l in range(L):
                racc[:] = 0
                for y in range(ho):
                    erow = err[n, l, y]
                    for x in range(wo):
                        racc[x] += erow[x]
                gb[c, l] += racc.sum()
                for i in range(z):
                    for a in range(ky):
                        for b in range(kx):
                            racc[:] = 0
                            for y in range(ho):
                                erow = err[n, l, y]
                                xrow = xp[n, i, y + a, b:b + wo]
                                for x in range(wo):
                                    racc[x] += erow[x] * xrow[x]
                            gw[c, l, i, a, b] += racc.sum()
            if need_input:
                for i in range(z):
                    for l in range(L):
                        for a in range(ky):
                            for b in range(kx):
                                wv = w[l, i, a, b]
                                for y in range(ho):
                                    erow = err[n, l, y]
                                    grow = gin[n, i, y + a, b:b + wo]
                                    for x in range(wo):
                                        grow[x] += wv * erow[x]


_forward = kernel(_forward_impl)
_backward = kernel(_backward_impl)


@dataclass
class ConvLayer:
    """``out_depth`` kernels of shape (in_depth, ky, kx) plus bias."""

    in_depth: int
    out_depth: int
    ky: int = 5
    kx: int = 5
    padding: str = "same"
    dtype: type = DTYPE
    weights: np.ndarray = None
    bias: np.ndarray = None
    counters: OpCounter = field(default_factory=OpCounter)

    kind = "conv"

    def __post_init__(self):
        if self.ky % 2 == 0 or self.kx % 2 == 0:
            raise ConfigError(f"kernel sides must be odd, got {self.ky}x{self.kx}")
        if self.in_depth < 1 or self.out_depth < 1:
            raise ConfigError("conv depths must be positive")
        if self.padding not in PADDINGS:
            raise ConfigError(f"padding must be one of {PADDINGS}")
        shape = (self.out_depth, self.in_depth, self.ky, self.kx)
        if self.weights is None:
            self.weights = np.zeros(shape, dtype=self.dtype)
        if self.bias is None:
            self.bias = np.zeros(self.out_depth, dtype=self.dtype)
        self.weights = np.ascontiguousarray(self.weights, dtype=self.dtype)
        self.bias = np.ascontiguousarray(self.bias, dtype=self.dtype)
        if self.weights.shape != shape or self.bias.shape != (self.out_depth,):
            raise ConfigError(f"weights {self.weights.shape} / bias {self.bias.shape} "
                              f"do not match {shape}")
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None
        self._xp = None

    @classmethod
    def create(cls, in_depth, out_depth, ky, kx, rng: np.random.Generator, **kwargs):
        layer = cls(in_depth, out_depth, ky, kx, **kwargs)
        a = math.sqrt(6.0 / (in_depth * ky * kx))
        layer.weights[...] = rng.uniform(-a, a, size=layer.weights.shape)
        return layer

    @property
    def pad(self) -> tuple[int, int]:
        if self.padding == "same":
            return self.ky // 2, self.kx // 2
        return 0, 0

    def param_count(self) -> int:
        return self.weights.size + self.bias.size

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.grad_weights, self.grad_bias]

    def astype(self, dtype) -> "ConvLayer":
        return ConvLayer(self.in_depth, self.out_depth, self.ky, self.kx, self.padding, dtype,
                         self.weights.astype(dtype), self.bias.astype(dtype))

    def output_shape(self, in_shape):
        n, _, h, w = in_shape
        if self.padding == "valid":
            h, w = max(h - self.ky + 1, 0), max(w - self.kx + 1, 0)
        return (n, self.out_depth, h, w)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if isinstance(x, Tensor):
            x = x.data
        if x.ndim != 4 or x.shape[1] != self.in_depth:
            raise ConfigError(f"conv layer expects depth {self.in_depth}, got shape {x.shape}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        py, px = self.pad
        xp = pad2d(x, py, px)
        shape = self.output_shape(x.shape)
        out = np.empty(shape, dtype=self.dtype)
        counts = np.zeros((x.shape[0], 4), dtype=np.int64)
        _forward(xp, self.weights, self.bias, shape[2], shape[3], out, counts)
        self.counters.add_counts(counts)
        self._x, self._xp = x, xp
        return out

    __call__ = forward

    def backward(self, err: np.ndarray, need_input: bool = True):
        if self._xp is None:
            raise RuntimeError("backward called before forward")
        x, xp = self._x, self._xp
        if err.shape != self.output_shape(x.shape):
            raise ConfigError(f"error shape {err.shape} does not match output "
                              f"{self.output_shape(x.shape)}")
        err = np.ascontiguousarray(err, dtype=self.dtype)
        n = x.shape[0]
        chunks = max(1, -(-n // CHUNK))
        gw = np.zeros((chunks,) + self.weights.shape, dtype=self.dtype)
        gb = np.zeros((chunks, self.out_depth), dtype=self.dtype)
        gin = np.zeros(xp.shape if need_input else (0, 0, 0, 0), dtype=self.dtype)
        _backward(xp, self.weights, err, need_input, CHUNK, gin, gw, gb)
        self.grad_weights = _reduce(gw)
        self.grad_bias = _reduce(gb)
        if not need_input:
            return None
        py, px = self.pad
        h, w = x.shape[2], x.shape[3]
        return np.ascontiguousarray(gin[:, :, py:py + h, px:px + w])


def conv_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def conv_backward(layer: ConvLayer, x: np.ndarray, err: np.ndarray):
    """``(err_in, (grad_weights, grad_bias))`` for ``err`` at input ``x``."""
    probe = layer.astype(layer.dtype)
    probe.forward(x)
    err_in = probe.backward(err)
    return err_in, (probe.grad_weights, probe.grad_bias)
