"""Dense rank-4 tensors in (batch, depth, height, width) layout.

The layers work on plain ``numpy`` arrays for speed; :class:`Tensor` is the
bounds-checked view used by reference code and tests, and by anything that
needs zero-padded window reads.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

DTYPE = np.float32
# Only used by gradient checking, where finite differences need headroom.
DTYPE64 = np.float64


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @classmethod
    def of(cls, dims) -> "Shape":
        if len(dims) != 4:
            raise ValueError(f"expected 4 dimensions, got {len(dims)}")
        shape = cls(*(int(d) for d in dims))
        shape.validate()
        return shape

    def validate(self) -> None:
        if any(d < 0 for d in self):
            raise ValueError(f"negative dimension in {tuple(self)}")
        if self.size > np.iinfo(np.intp).max:
            raise ValueError(f"shape {tuple(self)} exceeds addressable range")

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


class Tensor:
    """Contiguous row-major (N, C, H, W) storage with bounds-checked access."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        if data.ndim != 4:
            raise ValueError(f"Tensor needs a rank-4 array, got rank {data.ndim}")
        if data.dtype not in (DTYPE, DTYPE64):
            raise TypeError(f"unsupported dtype {data.dtype}")
        self.data = np.ascontiguousarray(data)

    @property
    def shape(self) -> Shape:
        return Shape(*self.data.shape)

    def __len__(self) -> int:
        return self.data.size

    def _check(self, n, c, y, x) -> None:
        N, C, H, W = self.data.shape
        if not (0 <= n < N and 0 <= c < C and 0 <= y < H and 0 <= x < W):
            raise IndexError(f"({n}, {c}, {y}, {x}) out of range for {self.data.shape}")

    def get(self, n: int, c: int, y: int, x: int):
        self._check(n, c, y, x)
        return self.data[n, c, y, x]

    def set(self, n: int, c: int, y: int, x: int, value) -> None:
        self._check(n, c, y, x)
        self.data[n, c, y, x] = value

    def padded_get(self, n: int, c: int, y: int, x: int):
        """Read ``t[n, c, y, x]``, or exactly 0.0 when (y, x) is outside the plane."""
        N, C, H, W = self.data.shape
        assert 0 <= n < N and 0 <= c < C, (n, c)
        if 0 <= y < H and 0 <= x < W:
            return self.data[n, c, y, x]
        return self.data.dtype.type(0.0)


def zeros(shape, dtype=DTYPE) -> Tensor:
    shape = shape if isinstance(shape, Shape) else Shape.of(shape)
    shape.validate()
    try:
        data = np.zeros(tuple(shape), dtype=dtype)
    except MemoryError as exc:
        raise MemoryError(f"cannot allocate tensor of shape {tuple(shape)}") from exc
    return Tensor(data)


def padded_get(t: Tensor, n: int, c: int, y: int, x: int):
    return t.padded_get(n, c, y, x)


def zero_pad(x: np.ndarray, radius: int) -> np.ndarray:
    """Surround every (H, W) plane with ``radius`` zeros."""
    return pad2d(x, radius, radius)


def pad2d(x: np.ndarray, py: int, px: int) -> np.ndarray:
    if py == 0 and px == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * py, w + 2 * px), dtype=x.dtype)
    out[:, :, py:py + h, px:px + w] = x
    return out
