"""Layout and addressing arithmetic for userfault objects.

An object's reservation looks like this (offsets relative to the region base)::

    0          B-H        B                                   B+n*e     T
    | front pad | header  | element 0 | element 1 | ... |      | rear pad |

``B`` (the body start) is a multiple of the chunk size, so the header/body
boundary always falls on a chunk boundary.  Everything here is pure arithmetic
over immutable values.
"""

from __future__ import annotations

import mmap
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

DEFAULT_CHUNK_SIZE = 1 << 20

PopulateFn = Callable[[int, int, Any, np.ndarray], Optional[int]]


class LayoutError(ValueError):
    """Invalid object geometry or an out-of-range address."""


def page_size() -> int:
    return mmap.PAGESIZE or os.sysconf("SC_PAGE_SIZE")


def round_up(x: int, m: int) -> int:
    return -(-x // m) * m


@dataclass(frozen=True)
class UfoConfig:
    """Everything needed to create one object.

    ``populate(start_ix, end_ix, user_data, target)`` fills ``target`` (a
    writable ``uint8`` array of ``(end_ix - start_ix) * element_size`` bytes)
    and returns 0 or ``None`` on success.  It must be deterministic.
    """

    element_size: int
    element_count: int
    populate: Optional[PopulateFn] = None
    user_data: Any = None
    header_size: int = 0
    chunk_size: int = DEFAULT_CHUNK_SIZE
    read_only: bool = False
    dtype: Any = None

    def validate(self, page: int | None = None) -> None:
        page = page or page_size()
        if self.element_size < 1:
            raise LayoutError(f"element_size must be >= 1, got {self.element_size}")
        if self.element_count < 0:
            raise LayoutError(f"element_count must be >= 0, got {self.element_count}")
        if self.header_size < 0:
            raise LayoutError(f"header_size must be >= 0, got {self.header_size}")
        if self.chunk_size <= 0 or self.chunk_size % page:
            raise LayoutError(
                f"chunk_size must be a positive multiple of the page size {page}, "
                f"got {self.chunk_size}"
            )
        if self.dtype is not None and np.dtype(self.dtype).itemsize != self.element_size:
            raise LayoutError(
                f"dtype {np.dtype(self.dtype)} does not match element_size {self.element_size}"
            )


@dataclass(frozen=True)
class UfoLayout:
    header_size: int
    element_size: int
    element_count: int
    chunk_size: int
    page_size: int
    body_start: int
    total_reserved: int
    user_offset: int = field(init=False)
    front_pad: int = field(init=False)
    elements_per_chunk: int = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "user_offset", self.body_start - self.header_size)
        object.__setattr__(self, "front_pad", self.body_start - self.header_size)
        object.__setattr__(
            self, "elements_per_chunk", max(1, self.chunk_size // self.element_size)
        )

    @property
    def body_bytes(self) -> int:
        return self.element_count * self.element_size

    @property
    def body_end(self) -> int:
        return self.body_start + self.body_bytes

    @property
    def header_chunks(self) -> int:
        return self.body_start // self.chunk_size

    @property
    def chunk_count(self) -> int:
        """Number of chunks tiling ``[0, T)``, header chunks included."""
        return -(-self.total_reserved // self.chunk_size)

    def extent(self, ordinal: int) -> "ChunkExtent":
        """Extent of the ``ordinal``-th chunk counted from the region base."""
        if not 0 <= ordinal < self.chunk_count:
            raise LayoutError(f"chunk ordinal {ordinal} outside [0, {self.chunk_count})")
        C = self.chunk_size
        lo = ordinal * C
        hi = min(lo + C, self.total_reserved)
        if lo < self.body_start:
            return ChunkExtent(ordinal, lo, hi, 0, 0, header=True)
        B, e = self.body_start, self.element_size
        elem_lo = (lo - B) // e
        elem_hi = min(self.element_count, -(-(hi - B) // e))
        return ChunkExtent(ordinal - self.header_chunks, lo, hi, elem_lo, elem_hi)

    def extents(self):
        for k in range(self.chunk_count):
            yield self.extent(k)


@dataclass(frozen=True)
class ChunkExtent:
    """One materializable window.

    ``chunk_index`` counts body chunks from the body start (header chunks
    count from the region base and carry ``header=True``).  Elements that
    straddle the window edges are included in ``[elem_lo, elem_hi)``.
    """

    chunk_index: int
    byte_lo: int
    byte_hi: int
    elem_lo: int
    elem_hi: int
    header: bool = False

    @property
    def length(self) -> int:
        return self.byte_hi - self.byte_lo


def compute_layout(config: UfoConfig, page: int | None = None) -> UfoLayout:
    page = page or page_size()
    if page <= 0 or page & (page - 1):
        raise LayoutError(f"page size must be a power of two, got {page}")
    config.validate(page)
    H, e, n, C = config.header_size, config.element_size, config.element_count, config.chunk_size
    B = 0 if H == 0 else round_up(H, C)
    T = round_up(B + n * e, page)
    return UfoLayout(
        header_size=H,
        element_size=e,
        element_count=n,
        chunk_size=C,
        page_size=page,
        body_start=B,
        total_reserved=T,
    )


def chunk_of_offset(layout: UfoLayout, byte_offset: int) -> ChunkExtent:
    if not 0 <= byte_offset < layout.total_reserved:
        raise LayoutError(
            f"offset {byte_offset} outside reservation [0, {layout.total_reserved})"
        )
    return layout.extent(byte_offset // layout.chunk_size)


def index_to_offset(layout: UfoLayout, i: int) -> int:
    if not 0 <= i < layout.element_count:
        raise LayoutError(f"element index {i} outside [0, {layout.element_count})")
    return layout.body_start + i * layout.element_size


def offset_to_index(layout: UfoLayout, offset: int) -> int:
    if not layout.body_start <= offset < layout.body_end:
        raise LayoutError(
            f"offset {offset} outside body [{layout.body_start}, {layout.body_end})"
        )
    return (offset - layout.body_start) // layout.element_size
