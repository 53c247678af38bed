"""Population back-ends: from-to-by sequences, binary files, CSV columns and fills.

Each back-end is a module-level populate function with the signature
``populate(start_ix, end_ix, user_data, target) -> int`` plus a small spec
dataclass passed as ``user_data``.  Return value 0 means success.  The
``*_config`` helpers build a ready-to-use :class:`~ufo.layout.UfoConfig`.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .kernels import USE_NUMBA, csvparse, njit
from .layout import UfoConfig

log = logging.getLogger("ufo.backends")

STATUS_OK = 0
STATUS_SHORT_READ = 1
STATUS_IO_ERROR = 2
STATUS_PARSE_ERROR = 3


# ------------------------------------------------------------------ sequences


@dataclass(frozen=True)
class SeqSpec:
    from_: int
    to: int
    by: int = 1
    dtype: Any = np.int32

    def __post_init__(self) -> None:
        if self.by == 0:
            raise ValueError("sequence step must be nonzero")
        if np.dtype(self.dtype).kind not in "iu":
            raise ValueError(f"sequence dtype must be an integer type, got {np.dtype(self.dtype)}")

    @property
    def length(self) -> int:
        span = self.to - self.from_
        if span != 0 and (span > 0) != (self.by > 0):
            return 0
        return span // self.by + 1

    def value(self, i: int) -> int:
        return self.from_ + self.by * i


@njit
def _seq_fill_nb(out, start, first, step):
    for i in range(out.shape[0]):
        out[i] = first + step * (start + i)


def _seq_fill_np(out, start, first, step):
    idx = np.arange(start, start + out.shape[0], dtype=np.int64)
    out[:] = (idx * step + first).astype(out.dtype, casting="unsafe")


_seq_fill = _seq_fill_nb if USE_NUMBA else _seq_fill_np


def seq_populate(start_ix: int, end_ix: int, spec: SeqSpec, target: np.ndarray) -> int:
    if end_ix <= start_ix:
        return STATUS_OK
    out = target.view(np.dtype(spec.dtype).newbyteorder("<"))
    # int64 arithmetic wraps to the element width on store
    _seq_fill(out, np.int64(start_ix), np.int64(spec.from_), np.int64(spec.by))
    return STATUS_OK


def seq_config(from_: int, to: int, by: int = 1, dtype=np.int32, **kwargs) -> UfoConfig:
    spec = SeqSpec(from_, to, by, dtype)
    dt = np.dtype(dtype)
    return UfoConfig(element_size=dt.itemsize, element_count=spec.length,
                     populate=seq_populate, user_data=spec, dtype=dt, **kwargs)


# --------------------------------------------------------------- binary files


@dataclass(frozen=True)
class FileSpec:
    path: str
    element_size: int
    element_count: int
    base_offset: int = 0
    dtype: Any = None

    def check(self) -> None:
        size = os.path.getsize(self.path)
        need = self.base_offset + self.element_count * self.element_size
        if size < need:
            raise ValueError(f"{self.path} holds {size} bytes, {need} needed")


def file_populate(start_ix: int, end_ix: int, spec: FileSpec, target: np.ndarray) -> int:
    if end_ix <= start_ix:
        return STATUS_OK
    e = spec.element_size
    want = (end_ix - start_ix) * e
    offset = spec.base_offset + start_ix * e
    view = memoryview(target)[:want]
    try:
        fd = os.open(spec.path, os.O_RDONLY | os.O_CLOEXEC)
    except OSError as exc:
        log.error("cannot open %s: %s", spec.path, exc)
        return STATUS_IO_ERROR
    try:
        got = 0
        while got < want:
            n = os.preadv(fd, [view[got:]], offset + got)
            if n == 0:
                log.error("short read from %s: %d of %d bytes at offset %d",
                          spec.path, got, want, offset)
                return STATUS_SHORT_READ
            got += n
    except OSError as exc:
        log.error("read from %s failed: %s", spec.path, exc)
        return STATUS_IO_ERROR
    finally:
        os.close(fd)
    return STATUS_OK


def file_config(path, dtype=np.int32, count: Optional[int] = None, base_offset: int = 0,
                **kwargs) -> UfoConfig:
    dt = np.dtype(dtype)
    path = os.fspath(path)
    if count is None:
        count = (os.path.getsize(path) - base_offset) // dt.itemsize
    spec = FileSpec(path, dt.itemsize, count, base_offset, dt)
    spec.check()
    return UfoConfig(element_size=dt.itemsize, element_count=count,
                     populate=file_populate, user_data=spec, dtype=dt, **kwargs)


# ------------------------------------------------------------------------ CSV

ROW_GROUP = 1000


class CsvScanError(ValueError):
    pass


@dataclass(frozen=True)
class CsvColumn:
    name: str
    kind: str  # "int64" | "float64"


@dataclass(frozen=True)
class CsvIndex:
    path: str
    row_count: int
    columns: tuple
    group_size: int
    group_offsets: np.ndarray = field(repr=False)
    data_end: int

    def column(self, key) -> int:
        if isinstance(key, int):
            if not 0 <= key < len(self.columns):
                raise KeyError(f"column ordinal {key} out of range")
            return key
        for i, c in enumerate(self.columns):
            if c.name == key:
                return i
        raise KeyError(f"no column named {key!r}")

    def fragment(self, start_ix: int, end_ix: int) -> tuple[int, int, int]:
        """Byte range covering rows ``[start_ix, end_ix)`` and rows to skip inside it."""
        g = start_ix // self.group_size
        last = (end_ix - 1) // self.group_size + 1
        lo = int(self.group_offsets[g])
        hi = int(self.group_offsets[last]) if last < len(self.group_offsets) else self.data_end
        return lo, hi, start_ix - g * self.group_size


def _read_header(data: np.ndarray) -> tuple[list[str], int]:
    nl = np.flatnonzero(data[: 1 << 20] == 10)
    end = int(nl[0]) + 1 if nl.size else int(data.size)
    line = data[:end].tobytes().decode("utf-8").rstrip("\r\n")
    try:
        names = next(csv.reader([line], strict=True))
    except (csv.Error, StopIteration) as exc:
        raise CsvScanError(f"malformed header row: {exc}") from None
    return names, end


def csv_scan(path, group: int = ROW_GROUP, use_numba: bool = USE_NUMBA) -> CsvIndex:
    path = os.fspath(path)
    size = os.path.getsize(path)
    if size == 0:
        raise CsvScanError(f"{path} is empty; a header row is required")
    data = np.memmap(path, dtype=np.uint8, mode="r")
    try:
        names, start = _read_header(data)
        rows, offsets, is_int, err, pos = csvparse.scan(data, start, len(names), group, use_numba)
    finally:
        del data
    if err:
        raise CsvScanError(f"{path}: {csvparse.ERROR_TEXT[err]} near byte {pos}")
    columns = tuple(CsvColumn(n, "int64" if is_int[i] else "float64") for i, n in enumerate(names))
    return CsvIndex(path, rows, columns, group, np.asarray(offsets, dtype=np.int64), size)


@dataclass(frozen=True)
class CsvSpec:
    index: CsvIndex
    column: int

    @property
    def kind(self) -> str:
        return self.index.columns[self.column].kind


class CsvStats:
    """Seek counter for the CSV back-end (per process)."""

    seeks = 0
    populate_calls = 0


def csv_populate(start_ix: int, end_ix: int, spec: CsvSpec, target: np.ndarray) -> int:
    if end_ix <= start_ix:
        return STATUS_OK
    index = spec.index
    lo, hi, skip = index.fragment(start_ix, end_ix)
    try:
        with open(index.path, "rb") as fh:
            fh.seek(lo)
            CsvStats.seeks += 1
            raw = fh.read(hi - lo)
    except OSError as exc:
        log.error("cannot read %s: %s", index.path, exc)
        return STATUS_IO_ERROR
    CsvStats.populate_calls += 1
    buf = np.frombuffer(raw, dtype=np.uint8)
    values, err = csvparse.parse_column(buf, skip, end_ix - start_ix, spec.column, spec.kind)
    if err:
        log.error("%s rows [%d, %d) column %d: %s", index.path, start_ix, end_ix,
                  spec.column, csvparse.ERROR_TEXT[err])
        return STATUS_PARSE_ERROR
    target.view(np.dtype(spec.kind).newbyteorder("<"))[:] = values
    return STATUS_OK


def csv_config(index: CsvIndex, column, **kwargs) -> UfoConfig:
    col = index.column(column)
    spec = CsvSpec(index, col)
    dt = np.dtype(spec.kind)
    return UfoConfig(element_size=8, element_count=index.row_count,
                     populate=csv_populate, user_data=spec, dtype=dt, **kwargs)


# ----------------------------------------------------------------------- fill


@dataclass(frozen=True)
class FillSpec:
    value: bytes
    element_count: int = 0

    @classmethod
    def of(cls, value, dtype, element_count: int = 0) -> "FillSpec":
        return cls(np.array(value, dtype=np.dtype(dtype).newbyteorder("<")).tobytes(), element_count)


def fill_populate(start_ix: int, end_ix: int, spec: FillSpec, target: np.ndarray) -> int:
    if end_ix <= start_ix:
        return STATUS_OK
    e = len(spec.value)
    count = end_ix - start_ix
    target[: count * e].reshape(count, e)[:] = np.frombuffer(spec.value, dtype=np.uint8)
    return STATUS_OK


def fill_config(value, count: int, dtype=np.int32, **kwargs) -> UfoConfig:
    dt = np.dtype(dtype)
    spec = FillSpec.of(value, dt, count)
    return UfoConfig(element_size=dt.itemsize, element_count=count,
                     populate=fill_populate, user_data=spec, dtype=dt, **kwargs)


__all__ = [
    "SeqSpec", "seq_populate", "seq_config",
    "FileSpec", "file_populate", "file_config",
    "CsvIndex", "CsvColumn", "CsvScanError", "CsvSpec", "CsvStats", "csv_scan",
    "csv_populate", "csv_config",
    "FillSpec", "fill_populate", "fill_config",
]
