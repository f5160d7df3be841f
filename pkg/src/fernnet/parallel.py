"""Kernel dispatch between serial and multi-threaded numba builds.

Every kernel body is written once with ``prange``.  The serial build is
compiled eagerly-cached; the threaded build only when more than one worker
is requested.  Kernels never let the worker count change a result: batch
work is split into fixed-size chunks and per-chunk buffers are reduced in
chunk order.
"""

from __future__ import annotations

import numba

# Samples per gradient buffer.  Fixed, so reductions do not depend on threads.
CHUNK = 16

_threads = 1


def set_threads(n: int) -> int:
    """Select the worker count for subsequent kernel calls; returns the count used."""
    global _threads
    if n < 1:
        raise ValueError("threads must be >= 1")
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    if n > 1:
        numba.set_num_threads(n)
    _threads = n
    return n


def get_threads() -> int:
    return _threads


class Kernel:
    """A pair of numba builds of one python kernel body."""

    def __init__(self, func):
        self.func = func
        self.serial = numba.njit(cache=True, nogil=True)(func)
        self._parallel = None

    @property
    def parallel(self):
        if self._parallel is None:
            self._parallel = numba.njit(parallel=True, nogil=True)(self.func)
        return self._parallel

    def __call__(self, *args):
        if _threads > 1:
            return self.parallel(*args)
        return self.serial(*args)


def kernel(func) -> Kernel:
    return Kernel(func)
