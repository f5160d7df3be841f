"""Network plumbing around the fern and convolution layers.

Activations, 2x2 max pooling, fully connected layers, softmax
cross-entropy, Adam, LeNet-5 assembly and checkpoint files.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .convref import ConvLayer
from .errors import ConfigError, DataError, NumericError
from .fern import FernLayer, IndexPattern, PatternSet, builtin_pattern
from .tensor import DTYPE


class ReLU:
    kind = "relu"

    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return np.maximum(x, x.dtype.type(0))

    def backward(self, err, need_input=True):
        return np.where(self._x > 0, err, err.dtype.type(0))

    def params(self):
        return []

    def grads(self):
        return []

    def output_shape(self, in_shape):
        return tuple(in_shape)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, err):
    return np.where(x > 0, err, 0).astype(err.dtype)


@numba.njit(cache=True, nogil=True)
def _pool_forward(x, out, arg):
    N, C, ho, wo = out.shape
    for n in range(N):
        for c in range(C):
            for y in range(ho):
                for xx in range(wo):
                    best = x[n, c, 2 * y, 2 * xx]
                    pick = 0
                    for j in range(1, 4):
                        v = x[n, c, 2 * y + j // 2, 2 * xx + j % 2]
                        if v > best:
                            best = v
                            pick = j
                    out[n, c, y, xx] = best
                    arg[n, c, y, xx] = pick


@numba.njit(cache=True, nogil=True)
def _pool_backward(err, arg, gin):
    N, C, ho, wo = err.shape
    for n in range(N):
        for c in range(C):
            for y in range(ho):
                for xx in range(wo):
                    j = arg[n, c, y, xx]
                    gin[n, c, 2 * y + j // 2, 2 * xx + j % 2] = err[n, c, y, xx]


class MaxPool2x2:
    """2x2/2 max pooling.  Ties go to the first element in row-major order;
    odd trailing rows/columns are dropped."""

    kind = "maxpool"

    def __init__(self):
        self._arg = None
        self._in_shape = None

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        return (n, c, h // 2, w // 2)

    def forward(self, x):
        x = np.ascontiguousarray(x)
        out = np.empty(self.output_shape(x.shape), dtype=x.dtype)
        self._arg = np.empty(out.shape, dtype=np.int8)
        _pool_forward(x, out, self._arg)
        self._in_shape = x.shape
        return out

    def backward(self, err, need_input=True):
        gin = np.zeros(self._in_shape, dtype=err.dtype)
        _pool_backward(np.ascontiguousarray(err), self._arg, gin)
        return gin

    def params(self):
        return []

    def grads(self):
        return []


def maxpool2x2_forward(x):
    return MaxPool2x2().forward(x)


class Flatten:
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def output_shape(self, in_shape):
        return (in_shape[0], int(np.prod(in_shape[1:])))

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, err, need_input=True):
        return err.reshape(self._shape)

    def params(self):
        return []

    def grads(self):
        return []


class Dense:
    """Fully connected layer, ``y = x @ weights.T + bias``."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, dtype=DTYPE,
                 weights=None, bias=None):
        self.in_features = in_features
        self.out_features = out_features
        self.dtype = np.dtype(dtype).type
        shape = (out_features, in_features)
        self.weights = np.zeros(shape, self.dtype) if weights is None else \
            np.ascontiguousarray(weights, dtype=self.dtype)
        self.bias = np.zeros(out_features, self.dtype) if bias is None else \
            np.ascontiguousarray(bias, dtype=self.dtype)
        if self.weights.shape != shape or self.bias.shape != (out_features,):
            raise ConfigError(f"dense weights {self.weights.shape} do not match {shape}")
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    @classmethod
    def create(cls, in_features, out_features, rng, **kwargs):
        layer = cls(in_features, out_features, **kwargs)
        a = math.sqrt(6.0 / in_features)
        layer.weights[...] = rng.uniform(-a, a, size=layer.weights.shape)
        return layer

    def output_shape(self, in_shape):
        if in_shape[1] != self.in_features:
            raise ConfigError(f"dense layer expects {self.in_features} inputs, got {in_shape[1]}")
        return (in_shape[0], self.out_features)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ConfigError(f"dense layer expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.weights.T + self.bias

    def backward(self, err, need_input=True):
        self.grad_weights = err.T @ self._x
        self.grad_bias = err.sum(axis=0)
        return err @ self.weights if need_input else None

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.grad_weights, self.grad_bias]

    def astype(self, dtype):
        return Dense(self.in_features, self.out_features, dtype,
                     self.weights.astype(dtype), self.bias.astype(dtype))


def fc_forward(layer: Dense, x):
    return layer.forward(x)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ConfigError(f"logits {logits.shape} and labels {labels.shape} disagree")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ConfigError(f"labels must lie in [0, {classes})")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(total[:, 0]) - shifted[rows, labels]))
    dlogits = exp / total
    dlogits[rows, labels] -= 1
    dlogits /= n
    return loss, dlogits.astype(logits.dtype)


# --------------------------------------------------------------------------
# model

class Model:
    """Ordered layer stack with a uniform parameter/gradient view."""

    def __init__(self, layers, name: str = "model"):
        self.layers = list(layers)
        self.name = name

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, err):
        for pos in range(len(self.layers) - 1, -1, -1):
            err = self.layers[pos].backward(err, need_input=pos > 0)
        return err

    def loss_and_grads(self, x, labels):
        logits = self.forward(x)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        self.backward(dlogits)
        return loss, logits

    def predict(self, x, batch_size: int = 500):
        out = []
        for start in range(0, x.shape[0], batch_size):
            out.append(self.forward(x[start:start + batch_size]).argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def parameterized(self):
        return [layer for layer in self.layers if layer.params()]

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def param_count(self, kinds=None) -> int:
        return sum(p.size for layer in self.layers
                   if kinds is None or layer.kind in kinds
                   for p in layer.params())

    def check_shapes(self, in_shape):
        shape = tuple(in_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def astype(self, dtype) -> "Model":
        layers = [layer.astype(dtype) if hasattr(layer, "astype") else type(layer)()
                  for layer in self.layers]
        return Model(layers, self.name)

    def set_heuristic(self, on: bool) -> None:
        for layer in self.layers:
            if layer.kind == "fern":
                layer.heuristic = on


MODEL_KINDS = ("conv", "TI1", "TI2", "TI3")


def build_lenet5(kind: str = "conv", rng: np.random.Generator | None = None,
                 in_shape=(1, 28, 28), classes: int = 10,
                 patterns: PatternSet | None = None, heuristic: bool = True,
                 dtype=DTYPE) -> Model:
    """LeNet-5 with ReLU.  ``kind`` picks 5x5 convolutions or fern layers with
    a built-in pattern set; ``patterns`` overrides the set for fern models."""
    if rng is None:
        rng = np.random.default_rng(0)
    if kind not in MODEL_KINDS and patterns is None:
        raise ConfigError(f"unknown model kind {kind!r}; valid: {', '.join(MODEL_KINDS)}")
    depth, h, w = in_shape

    def replaceable(z, L):
        if kind == "conv" and patterns is None:
            return ConvLayer.create(z, L, 5, 5, rng, dtype=dtype)
        ps = patterns if patterns is not None else builtin_pattern(kind)
        return FernLayer.create(z, L, ps, rng, heuristic=heuristic, dtype=dtype)

    front = [replaceable(depth, 6), ReLU(), MaxPool2x2(),
             replaceable(6, 16), ReLU(), MaxPool2x2(), Flatten()]
    flat = Model(front).check_shapes((1, depth, h, w))[1]
    layers = front + [Dense.create(flat, 120, rng, dtype=dtype), ReLU(),
                      Dense.create(120, 84, rng, dtype=dtype), ReLU(),
                      Dense.create(84, classes, rng, dtype=dtype)]
    name = kind if patterns is None else f"fern-{patterns.name}"
    return Model(layers, f"lenet5-{name}")


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float, weight_decay=0.0, names=None):
    """One in-place Adam update with bias correction.

    Weight decay is coupled: ``grad + weight_decay * param`` feeds the
    moments.  ``weight_decay`` may be a scalar or one value per parameter.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if np.isscalar(weight_decay):
        weight_decay = [weight_decay] * len(params)
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for j, (p, g, wd) in enumerate(zip(params, grads, weight_decay)):
        if p.shape != g.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            where = names[j] if names else f"parameter {j}"
            raise NumericError(f"non-finite gradient in {where}")
        if wd:
            g = g + p.dtype.type(wd) * p
        m, v = state.m[j], state.v[j]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


class Adam:
    """Adam over a model, with weight decay chosen per layer kind."""

    def __init__(self, model: Model, weight_decay: dict | None = None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.model = model
        self.weight_decay = weight_decay or {}
        self.state = AdamState(beta1, beta2, eps)
        self._names = []
        self._decay = []
        for pos, layer in enumerate(model.layers):
            for j, _ in enumerate(layer.params()):
                self._names.append(f"layer {pos} ({layer.kind}) param {j}")
                self._decay.append(self.weight_decay.get(layer.kind, 0.0))

    def step(self, lr: float) -> None:
        adam_step(self.model.params(), self.model.grads(), self.state, lr,
                  self._decay, self._names)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"FERNCKPT"
VERSION = 1
_KIND_TAGS = {"conv": 0, "fern": 1, "relu": 2, "maxpool": 3, "flatten": 4, "dense": 5}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_PADDING = ("same", "valid")


def _describe(layer):
    """``(ints, float blocks)`` stored for one layer."""
    if layer.kind == "conv":
        ints = [layer.in_depth, layer.out_depth, layer.ky, layer.kx,
                _PADDING.index(layer.padding)]
        return ints, [layer.weights, layer.bias]
    if layer.kind == "fern":
        ps = layer.patterns
        ints = [layer.in_depth, layer.out_depth, _PADDING.index(layer.padding),
                int(layer.heuristic), ps.width]
        ints += [len(p) for p in ps.patterns]
        ints += [c for p in ps.patterns for off in p.offsets for c in off]
        return ints, [layer.weights, layer.bias]
    if layer.kind == "dense":
        return [layer.in_features, layer.out_features], [layer.weights, layer.bias]
    if layer.kind == "maxpool":
        return [2], []
    return [], []


def save_checkpoint(model: Model, path) -> None:
    """Write ``model`` in the checkpoint format documented in the README."""
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(model.layers))
    for layer in model.layers:
        ints, blocks = _describe(layer)
        out += struct.pack("<II", _KIND_TAGS[layer.kind], len(ints))
        out += np.asarray(ints, dtype="<i4").tobytes()
        out += struct.pack("<I", len(blocks))
        for block in blocks:
            flat = np.ascontiguousarray(block, dtype="<f4").ravel()
            out += struct.pack("<I", flat.size)
            out += flat.tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.data):
            raise DataError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def ints(self, count: int, what: str) -> list[int]:
        return np.frombuffer(self.take(4 * count, what), dtype="<i4").tolist()

    def floats(self, what: str) -> np.ndarray:
        count = self.u32(what)
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(DTYPE)


def load_checkpoint(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)", 0)
    if len(data) < len(MAGIC) + 12:
        raise DataError("truncated checkpoint", len(data))
    body, stored = data[:-4], struct.unpack("<I", data[-4:])[0]
    rd = _Reader(body)
    rd.take(len(MAGIC), "magic")
    version = rd.u32("version")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version} (expected {VERSION})", 8)
    count = rd.u32("layer count")
    layers = []
    for li in range(count):
        start = rd.pos
        tag = rd.u32(f"layer {li} kind")
        if tag not in _TAG_KINDS:
            raise DataError(f"unknown layer tag {tag}", start)
        ints = rd.ints(rd.u32(f"layer {li} descriptor length"), f"layer {li} descriptor")
        blocks = [rd.floats(f"layer {li} parameters") for _ in range(rd.u32(f"layer {li} blocks"))]
        try:
            layers.append(_rebuild(_TAG_KINDS[tag], ints, blocks))
        except (ConfigError, ValueError, IndexError) as exc:
            raise DataError(f"inconsistent layer {li}: {exc}", start) from None
    if rd.pos != len(body):
        raise DataError("trailing bytes after last layer", rd.pos)
    if zlib.crc32(body) != stored:
        raise DataError("checkpoint checksum mismatch", len(body))
    return Model(layers, Path(path).stem)


def _rebuild(kind, ints, blocks):
    if kind == "conv":
        z, L, ky, kx, pad = ints
        return ConvLayer(z, L, ky, kx, _PADDING[pad],
                         weights=blocks[0].reshape(L, z, ky, kx), bias=blocks[1])
    if kind == "fern":
        z, L, pad, heuristic, b = ints[:5]
        sizes = ints[5:5 + b]
        coords = ints[5 + b:]
        if len(coords) != 2 * sum(sizes):
            raise ConfigError("pattern offsets do not match branch sizes")
        patterns, pos = [], 0
        for size in sizes:
            offs = tuple((coords[pos + 2 * m], coords[pos + 2 * m + 1]) for m in range(size))
            patterns.append(IndexPattern(offs))
            pos += 2 * size
        ps = PatternSet(tuple(patterns), "checkpoint")
        for name in ("TI1", "TI2", "TI3"):
            if builtin_pattern(name).patterns == ps.patterns:
                ps = builtin_pattern(name)
        S = ps.weights_per_depth
        table = blocks[0].reshape(L, z, S).transpose(1, 2, 0)
        return FernLayer(z, L, ps, _PADDING[pad], bool(heuristic), table=table, bias=blocks[1])
    if kind == "dense":
        fin, fout = ints
        return Dense(fin, fout, weights=blocks[0].reshape(fout, fin), bias=blocks[1])
    return {"relu": ReLU, "maxpool": MaxPool2x2, "flatten": Flatten}[kind]()
