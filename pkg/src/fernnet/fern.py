"""Decision-tree (random fern) layer.

Every output position compares the window's central value against a fixed
set of neighbour offsets.  The comparison bits form an index into a small
weight distribution; the selected weight is multiplied by the central value.
Indices depend only on the input, so they are computed once per
(input depth, branch, position) and shared by all output layers.

Bit convention: bit ``m`` of an index is ``center > neighbour_m`` (strict,
ties give 0) and the first listed offset is the least significant bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numba
import numpy as np
from numba import prange

from .errors import ConfigError, DataError
from .parallel import CHUNK, kernel
from .tensor import DTYPE, Tensor, zero_pad

MAX_BITS = 16
PADDINGS = ("same", "valid")


@dataclass(frozen=True)
class IndexPattern:
    """Ordered (dy, dx) offsets compared against the window centre."""

    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        offsets = tuple((int(dy), int(dx)) for dy, dx in self.offsets)
        object.__setattr__(self, "offsets", offsets)
        if not 1 <= len(offsets) <= MAX_BITS:
            raise ConfigError(f"pattern needs 1..{MAX_BITS} offsets, got {len(offsets)}")
        if (0, 0) in offsets:
            raise ConfigError("pattern may not compare the centre with itself")
        if len(set(offsets)) != len(offsets):
            raise ConfigError(f"duplicate offsets in pattern {offsets}")

    def __len__(self) -> int:
        return len(self.offsets)

    @property
    def window_radius(self) -> int:
        return max(max(abs(dy), abs(dx)) for dy, dx in self.offsets)

    @property
    def distribution_size(self) -> int:
        return 1 << len(self.offsets)


@dataclass(frozen=True)
class PatternSet:
    """Inception branches: one :class:`IndexPattern` per branch."""

    patterns: tuple[IndexPattern, ...]
    name: str = "custom"

    def __post_init__(self):
        patterns = tuple(p if isinstance(p, IndexPattern) else IndexPattern(tuple(p))
                         for p in self.patterns)
        object.__setattr__(self, "patterns", patterns)
        if not patterns:
            raise ConfigError("a pattern set needs at least one pattern")

    @property
    def width(self) -> int:
        return len(self.patterns)

    @property
    def radius(self) -> int:
        return max(p.window_radius for p in self.patterns)

    @property
    def total_bits(self) -> int:
        return sum(len(p) for p in self.patterns)

    @property
    def weights_per_depth(self) -> int:
        """Distribution entries per (output layer, input depth) pair."""
        return sum(p.distribution_size for p in self.patterns)

    def flat(self):
        return self._flat

    @cached_property
    def _flat(self):
        """Offsets flattened for the kernels.

        Returns ``(dy, dx, branch_start, dist_start)``: offsets of branch k are
        ``dy[branch_start[k]:branch_start[k+1]]`` and its distribution starts at
        column ``dist_start[k]`` of a concatenated weight row.
        """
        dy = np.array([o[0] for p in self.patterns for o in p.offsets], dtype=np.int64)
        dx = np.array([o[1] for p in self.patterns for o in p.offsets], dtype=np.int64)
        sizes = [len(p) for p in self.patterns]
        branch_start = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        dists = [p.distribution_size for p in self.patterns]
        dist_start = np.concatenate([[0], np.cumsum(dists)[:-1]]).astype(np.int64)
        return dy, dx, branch_start, dist_start


def _window_offsets(radius: int) -> list[tuple[int, int]]:
    return [(dy, dx)
            for dy in range(-radius, radius + 1)
            for dx in range(-radius, radius + 1)
            if (dy, dx) != (0, 0)]


def builtin_pattern(name: str) -> PatternSet:
    """TI1: 4-neighbour cross.  TI2: full 3x3 ring.  TI3: 5x5 ring in 6 groups of 4."""
    if name == "TI1":
        return PatternSet((IndexPattern(((-1, 0), (0, -1), (0, 1), (1, 0))),), "TI1")
    if name == "TI2":
        return PatternSet((IndexPattern(tuple(_window_offsets(1))),), "TI2")
    if name == "TI3":
        ring = _window_offsets(2)
        groups = tuple(IndexPattern(tuple(ring[g:g + 4])) for g in range(0, 24, 4))
        return PatternSet(groups, "TI3")
    raise ConfigError(f"unknown pattern {name!r}; valid names: {', '.join(BUILTIN_PATTERNS)}")


BUILTIN_PATTERNS = ("TI1", "TI2", "TI3")


def parse_patterns(text: str, name: str = "custom") -> PatternSet:
    """Parse the pattern file format (see README): one branch per line,
    ``dy,dx`` pairs separated by ``;``.  ``#`` starts a comment."""
    patterns = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        offsets = []
        for item in line.split(";"):
            item = item.strip()
            if not item:
                continue
            parts = item.split(",")
            try:
                dy, dx = (int(p) for p in parts)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad offset {item!r}, expected 'dy,dx'") from None
            offsets.append((dy, dx))
        try:
            patterns.append(IndexPattern(tuple(offsets)))
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    if not patterns:
        raise ConfigError("pattern file contains no patterns")
    return PatternSet(tuple(patterns), name)


def format_patterns(patterns: PatternSet) -> str:
    lines = [f"# {patterns.name}"]
    for p in patterns.patterns:
        lines.append("; ".join(f"{dy},{dx}" for dy, dx in p.offsets))
    return "\n".join(lines) + "\n"


def load_patterns(path) -> PatternSet:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read pattern file {path}: {exc}") from exc
    return parse_patterns(text, path.stem)


@dataclass
class OpCounter:
    """Arithmetic tallies.  Bias additions are kept apart from the MAC adds."""

    mults: int = 0
    adds: int = 0
    comparisons: int = 0
    bias_adds: int = 0

    def reset(self) -> None:
        self.mults = self.adds = self.comparisons = self.bias_adds = 0

    def add_counts(self, counts: np.ndarray) -> None:
        # counts rows: (mults, adds, comparisons, bias_adds), one row per sample
        mults, adds, comparisons, bias_adds = counts.sum(axis=0).tolist()
        self.mults += mults
        self.adds += adds
        self.comparisons += comparisons
        self.bias_adds += bias_adds

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.mults, self.adds, self.comparisons)


def compute_index(t: Tensor, n: int, i: int, y: int, x: int, pattern: IndexPattern) -> int:
    """Index selected by ``pattern`` at centre (y, x) of depth slice ``i``."""
    center = t.get(n, i, y, x)
    index = 0
    for m, (dy, dx) in enumerate(pattern.offsets):
        if center > t.padded_get(n, i, y + dy, x + dx):
            index |= 1 << m
    return index


def param_count(in_depth: int, out_depth: int, patterns: PatternSet) -> int:
    return in_depth * patterns.weights_per_depth * out_depth + out_depth


def _positions(in_shape, radius: int, padding: str) -> tuple[int, int]:
    _, _, h, w = in_shape
    if padding == "same":
        return h, w
    return max(h - 2 * radius, 0), max(w - 2 * radius, 0)


def predicted_ops(in_shape, out_depth: int, patterns: PatternSet, padding: str = "same"):
    """Closed-form ``(mults, adds, comparisons)`` for one forward call.

    ``in_shape`` is (N, z, H, W).  With t = output positions times input
    depth: comparisons = t * sum_k |BD_k| and mults = adds = t * b * L.
    """
    n, z, _, _ = in_shape
    ho, wo = _positions(in_shape, patterns.radius, padding)
    t = n * ho * wo * z
    macs = t * patterns.width * out_depth
    return macs, macs, t * patterns.total_bits


# --------------------------------------------------------------------------
# kernels

@numba.njit(cache=True, nogil=True)
def _fill_plane(src, plane, dy, dx, lo, hi, r):
    """Index plane of one branch (offsets ``lo:hi``) over a padded depth slice."""
    ho, wo = plane.shape
    ncmp = 0
    for y in range(ho):
        prow = plane[y]
        crow = src[y + r, r:r + wo]
        for x in range(wo):
            prow[x] = 0
        for m in range(lo, hi):
            oy = y + r + dy[m]
            ox = r + dx[m]
            nrow = src[oy, ox:ox + wo]
            shift = m - lo
            for x in range(wo):
                prow[x] |= np.int32(crow[x] > nrow[x]) << shift
                ncmp += 1
    return ncmp


def _indices_impl(xp, dy, dx, bstart, r, idx):
    N, z, b = idx.shape[0], idx.shape[1], idx.shape[2]
    for n in prange(N):
        for k in range(b):
            for i in range(z):
                _fill_plane(xp[n, i], idx[n, i, k], dy, dx, bstart[k], bstart[k + 1], r)


def _forward_impl(xp, dy, dx, bstart, dstart, table, bias, r, out, idx, counts):
    # xp: (N, z, Hp, Wp) input, already zero padded for "same" output
    # table: (z, S, L) distributions, output layer innermost
    # idx: (N, z, b, Ho, Wo) index cache, written here
    # counts: (N, 4) rows of mults, adds, comparisons, bias adds
    N, z = xp.shape[0], xp.shape[1]
    ho, wo = out.shape[2], out.shape[3]
    b = dstart.shape[0]
    L = table.shape[2]
    for n in prange(N):
        acc = np.empty((ho, wo, L), dtype=out.dtype)
        nbias = 0
        for y in range(ho):
            for x in range(wo):
                for l in range(L):
                    acc[y, x, l] = bias[l]
                    nbias += 1
        ncmp = 0
        nmac = 0
        for k in range(b):
            base = dstart[k]
            for i in range(z):
                src = xp[n, i]
                plane = idx[n, i, k]
                ncmp += _fill_plane(src, plane, dy, dx, bstart[k], bstart[k + 1], r)
                # one index per position, reused for every output layer
                for y in range(ho):
                    for x in range(wo):
                        v = src[y + r, x + r]
                        wrow = table[i, base + plane[y, x]]
                        a = acc[y, x]
                        for l in range(L):
                            a[l] += v * wrow[l]
                        nmac += L
        for l in range(L):
            for y in range(ho):
                for x in range(wo):
                    out[n, l, y, x] = acc[y, x, l]
        counts[n, 0] = nmac
        counts[n, 1] = nmac
        counts[n, 2] = ncmp
        counts[n, 3] = nbias


def _backward_impl(xp, idx, errt, dy, dx, bstart, dstart, table, r, heuristic, need_input,
                   chunk, gin, gtable, gbias):
    # errt: (N, Ho, Wo, L) output error, output layer innermost
    # gin: (N, z, Hp, Wp) input error on the padded grid
    # gtable: (chunks, z, S, L), gbias: (chunks, L) per-chunk gradient buffers
    N, z = xp.shape[0], xp.shape[1]
    ho, wo, L = errt.shape[1], errt.shape[2], errt.shape[3]
    b = dstart.shape[0]
    for c in prange(gtable.shape[0]):
        for n in range(c * chunk, min(N, (c + 1) * chunk)):
            for y in range(ho):
                for x in range(wo):
                    e = errt[n, y, x]
                    gb = gbias[c]
                    for l in range(L):
                        gb[l] += e[l]
                    for k in range(b):
                        nbits = bstart[k + 1] - bstart[k]
                        for i in range(z):
                            v = xp[n, i, y + r, x + r]
                            row = dstart[k] + idx[n, i, k, y, x]
                            wrow = table[i, row]
                            grow = gtable[c, i, row]
                            s = 0.0
                            for l in range(L):
                                grow[l] += v * e[l]
                                s += e[l] * wrow[l]
                            if need_input:
                                gin[n, i, y + r, x + r] += s
                                if heuristic:
                                    share = s / nbits
                                    for m in range(bstart[k], bstart[k + 1]):
                                        gin[n, i, y + r + dy[m], x + r + dx[m]] += share


_indices = kernel(_indices_impl)
_forward = kernel(_forward_impl)
_backward = kernel(_backward_impl)


def compute_indices(x: np.ndarray, patterns: PatternSet, padding: str = "same") -> np.ndarray:
    """All indices for ``x`` as an (N, z, b, Ho, Wo) int32 array."""
    r = patterns.radius
    xp = zero_pad(x, r) if padding == "same" else np.ascontiguousarray(x)
    ho, wo = _positions(x.shape, r, padding)
    dy, dx, bstart, _ = patterns.flat()
    idx = np.empty((x.shape[0], x.shape[1], patterns.width, ho, wo), dtype=np.int32)
    _indices(xp, dy, dx, bstart, r, idx)
    return idx


# --------------------------------------------------------------------------
# layer

class FernLayer:
    """Fern layer mapping ``in_depth`` input slices to ``out_depth`` outputs.

    Parameters live in ``table`` with shape (z, S, L): for input depth i,
    row ``dist_start[k] + index`` holds the selected weight of branch k for
    every output layer.  ``weights`` is the same storage viewed as (L, z, S).
    """

    kind = "fern"

    def __init__(self, in_depth: int, out_depth: int, patterns: PatternSet,
                 padding: str = "same", heuristic: bool = True, cache_indices: bool = True,
                 dtype=DTYPE, table: np.ndarray | None = None, bias: np.ndarray | None = None):
        if in_depth < 1 or out_depth < 1:
            raise ConfigError("fern depths must be positive")
        if padding not in PADDINGS:
            raise ConfigError(f"padding must be one of {PADDINGS}")
        self.in_depth = in_depth
        self.out_depth = out_depth
        self.patterns = patterns
        self.padding = padding
        self.heuristic = heuristic
        self.cache_indices = cache_indices
        self.dtype = np.dtype(dtype).type
        shape = (in_depth, patterns.weights_per_depth, out_depth)
        self.table = np.zeros(shape, self.dtype) if table is None else \
            np.ascontiguousarray(table, dtype=self.dtype)
        self.bias = np.zeros(out_depth, self.dtype) if bias is None else \
            np.ascontiguousarray(bias, dtype=self.dtype)
        if self.table.shape != shape or self.bias.shape != (out_depth,):
            raise ConfigError(f"table {self.table.shape} / bias {self.bias.shape} "
                              f"do not match {shape}")
        self.grad_table = np.zeros_like(self.table)
        self.grad_bias = np.zeros_like(self.bias)
        self.counters = OpCounter()
        self._x = self._xp = self._idx = None

    @classmethod
    def create(cls, in_depth: int, out_depth: int, patterns: PatternSet,
               rng: np.random.Generator, **kwargs) -> "FernLayer":
        """New layer with fan-in scaled uniform weights and zero bias."""
        layer = cls(in_depth, out_depth, patterns, **kwargs)
        a = math.sqrt(6.0 / (in_depth * patterns.width))
        layer.weights[...] = rng.uniform(-a, a, size=layer.weights.shape)
        return layer

    @property
    def weights(self) -> np.ndarray:
        """Distributions indexed [l, i, s] (a view of ``table``)."""
        return self.table.transpose(2, 0, 1)

    @property
    def grad_weights(self) -> np.ndarray:
        return self.grad_table.transpose(2, 0, 1)

    def distribution(self, l: int, i: int, k: int) -> np.ndarray:
        start = int(self.patterns.flat()[3][k])
        size = self.patterns.patterns[k].distribution_size
        return self.weights[l, i, start:start + size]

    def param_count(self) -> int:
        return self.table.size + self.bias.size

    def params(self) -> list[np.ndarray]:
        return [self.table, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_table, self.grad_bias]

    def astype(self, dtype) -> "FernLayer":
        return FernLayer(self.in_depth, self.out_depth, self.patterns, self.padding,
                         self.heuristic, self.cache_indices, dtype,
                         self.table.astype(dtype), self.bias.astype(dtype))

    def output_shape(self, in_shape):
        ho, wo = _positions(in_shape, self.patterns.radius, self.padding)
        return (in_shape[0], self.out_depth, ho, wo)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if isinstance(x, Tensor):
            x = x.data
        if x.ndim != 4 or x.shape[1] != self.in_depth:
            raise ConfigError(f"fern layer expects depth {self.in_depth}, got shape {x.shape}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        r = self.patterns.radius
        xp = zero_pad(x, r) if self.padding == "same" else x
        out = np.empty(self.output_shape(x.shape), dtype=self.dtype)
        n, _, ho, wo = out.shape
        idx = np.empty((n, self.in_depth, self.patterns.width, ho, wo), dtype=np.int32)
        counts = np.zeros((n, 4), dtype=np.int64)
        dy, dx, bstart, dstart = self.patterns.flat()
        _forward(xp, dy, dx, bstart, dstart, self.table, self.bias, r, out, idx, counts)
        self.counters.add_counts(counts)
        self._x, self._xp = x, xp
        self._idx = idx if self.cache_indices else None
        return out

    __call__ = forward

    def backward(self, err: np.ndarray, need_input: bool = True) -> np.ndarray | None:
        """Back-propagate ``err`` through the last forward call.

        Sets ``grad_table``/``grad_bias`` and returns the input error, or
        ``None`` when ``need_input`` is false.
        """
        if self._xp is None:
            raise RuntimeError("backward called before forward")
        x, xp = self._x, self._xp
        if err.shape != self.output_shape(x.shape):
            raise ConfigError(f"error shape {err.shape} does not match output "
                              f"{self.output_shape(x.shape)}")
        idx = self._idx
        if idx is None:
            idx = compute_indices(x, self.patterns, self.padding)
        n = x.shape[0]
        r = self.patterns.radius
        dy, dx, bstart, dstart = self.patterns.flat()
        errt = np.ascontiguousarray(err.transpose(0, 2, 3, 1), dtype=self.dtype)
        chunks = max(1, -(-n // CHUNK))
        gtable = np.zeros((chunks,) + self.table.shape, dtype=self.dtype)
        gbias = np.zeros((chunks, self.out_depth), dtype=self.dtype)
        gin = np.zeros(xp.shape if need_input else (0, 0, 0, 0), dtype=self.dtype)
        _backward(xp, idx, errt, dy, dx, bstart, dstart, self.table, r, self.heuristic,
                  need_input, CHUNK, gin, gtable, gbias)
        self.grad_table = _reduce(gtable)
        self.grad_bias = _reduce(gbias)
        if not need_input:
            return None
        if self.padding == "same":
            # contributions landing on the zero border are discarded
            h, w = x.shape[2], x.shape[3]
            return np.ascontiguousarray(gin[:, :, r:r + h, r:r + w])
        return gin


def _reduce(chunks: np.ndarray) -> np.ndarray:
    """Sum per-chunk buffers in chunk order."""
    total = chunks[0].copy()
    for c in range(1, chunks.shape[0]):
        total += chunks[c]
    return total


def forward(layer: FernLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def backward_input(layer: FernLayer, x: np.ndarray, err: np.ndarray,
                   heuristic: bool = True) -> np.ndarray:
    """Input error for ``err`` at input ``x``, recomputing the indices."""
    probe = layer.astype(layer.dtype)
    probe.heuristic = heuristic
    probe.cache_indices = False
    probe.forward(x)
    return probe.backward(err)


def grad_weights(layer: FernLayer, x: np.ndarray, err: np.ndarray):
    """``(grad_weights, grad_bias)`` for ``err`` at input ``x``; weights as [l, i, s]."""
    probe = layer.astype(layer.dtype)
    probe.forward(x)
    probe.backward(err, need_input=False)
    return probe.grad_weights, probe.grad_bias
