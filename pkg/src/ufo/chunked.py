"""Chunk-at-a-time computation over objects.

``map_into_ufo`` builds a derived object whose chunks are computed from the
matching ranges of its inputs when first touched.  ``reduce_chunks`` folds a
function over an object one chunk at a time, so only a bounded window is ever
resident.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .api import Core, UfoHandle
from .errors import UfoPoisoned
from .layout import UfoConfig


@dataclass(frozen=True)
class ChunkPlan:
    """Disjoint, ordered element ranges covering ``[0, n)``, each at most ``k`` long."""

    n: int
    k: int

    def __post_init__(self) -> None:
        if self.n < 0 or self.k < 1:
            raise ValueError(f"plan needs n >= 0 and k >= 1, got n={self.n}, k={self.k}")

    @classmethod
    def for_handle(cls, handle: UfoHandle, k: Optional[int] = None) -> "ChunkPlan":
        return cls(handle.element_count, k or handle.layout.elements_per_chunk)

    def __len__(self) -> int:
        return -(-self.n // self.k)

    def __iter__(self):
        for lo in range(0, self.n, self.k):
            yield lo, min(lo + self.k, self.n)


class MapPopulate:
    """Population function of a derived object: ``f`` over the inputs' ranges.

    ``pretouch`` runs before the guarded populate call and reads the inputs
    through the normal materialization path; ``__call__`` only computes.
    """

    def __init__(self, f: Callable, dtype) -> None:
        self.f = f
        self.dtype = np.dtype(dtype)

    def pretouch(self, lo: int, hi: int, inputs, reader) -> list:
        return [reader(h, lo, hi) for h in inputs]

    def __call__(self, lo: int, hi: int, arrays, target: np.ndarray) -> int:
        out = np.asarray(self.f(*arrays))
        target.view(self.dtype)[: hi - lo] = np.broadcast_to(out, (hi - lo,))
        return 0


def _infer_dtype(f: Callable, inputs: Sequence[UfoHandle]) -> np.dtype:
    probe = [np.zeros(1, dtype=h.dtype) for h in inputs]
    return np.asarray(f(*probe)).dtype


def map_into_ufo(core: Core, inputs, f: Callable, dtype=None, read_only: bool = False,
                 chunk_size: Optional[int] = None) -> UfoHandle:
    """New object whose element ``i`` is ``f(*[x[i] for x in inputs])``.

    ``f`` receives whole numpy ranges and must be element-wise.  Nothing is
    read from the inputs until the result is.
    """
    if isinstance(inputs, UfoHandle):
        inputs = [inputs]
    inputs = list(inputs)
    if not inputs:
        raise ValueError("map_into_ufo needs at least one input")
    n = inputs[0].element_count
    for h in inputs:
        h._check_local()
        if h.element_count != n:
            raise ValueError(f"input lengths differ: {n} vs {h.element_count}")
        if h.status == "poisoned":
            raise UfoPoisoned(h.id, h.error)
    dt = np.dtype(dtype) if dtype is not None else _infer_dtype(f, inputs)
    config = UfoConfig(element_size=dt.itemsize, element_count=n,
                       populate=MapPopulate(f, dt), user_data=tuple(inputs),
                       chunk_size=chunk_size or core.params.chunk_size,
                       read_only=read_only, dtype=dt)
    return core.new(config)


def _partial_dtype(ufunc: np.ufunc, dtype: np.dtype):
    # widen small integers so chunk partials cannot wrap
    if ufunc in (np.add, np.multiply):
        if dtype.kind == "i":
            return np.int64
        if dtype.kind in "ub":
            return np.uint64
    return None


def reduce_chunks(handle: UfoHandle, f: Callable, init, k: Optional[int] = None):
    """Fold ``f`` over the elements in index order, one plan range at a time.

    A binary numpy ufunc is applied with ``ufunc.reduce`` per range, with
    integer sums and products widened to 64 bits.  Any other ``f`` is folded
    element by element.
    """
    acc = init
    is_ufunc = isinstance(f, np.ufunc) and f.nin == 2
    for lo, hi in ChunkPlan.for_handle(handle, k):
        values = handle.read_range(lo, hi)
        if is_ufunc:
            partial = f.reduce(values, dtype=_partial_dtype(f, values.dtype))
            acc = f(acc, partial)
            if isinstance(acc, np.generic) and acc.dtype.kind in "iu":
                acc = int(acc)
        else:
            acc = functools.reduce(f, values.tolist(), acc)
    return acc


def sum_chunks(handle: UfoHandle):
    return reduce_chunks(handle, np.add, 0)
