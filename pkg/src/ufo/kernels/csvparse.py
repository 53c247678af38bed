"""CSV scanning and column extraction kernels.

Dialect: comma delimiter, double-quote quoting (``""`` escapes a quote),
``\\n`` or ``\\r\\n`` row endings, no newlines inside quoted fields.

``scan`` walks the body once, recording the byte offset of every G-th row
and whether each column holds only integers.  ``locate`` finds one column's
field boundaries inside a fragment that starts at a row boundary.
"""

from __future__ import annotations

import csv
import io
import re

import numpy as np

from . import USE_NUMBA, njit

OK = 0
ERR_UNTERMINATED = 1
ERR_EMBEDDED_NEWLINE = 2
ERR_WIDTH = 3
ERR_QUOTE = 4
ERR_INT = 5

ERROR_TEXT = {
    ERR_UNTERMINATED: "unterminated quoted field",
    ERR_EMBEDDED_NEWLINE: "newline inside a quoted field",
    ERR_WIDTH: "row has the wrong number of fields",
    ERR_QUOTE: "characters after a closing quote",
    ERR_INT: "field is not a 64-bit integer",
}

_COMMA, _QUOTE, _NL, _CR = 44, 34, 10, 13
_MAX_INT_DIGITS = 18  # anything longer might overflow int64; treat as float


# --------------------------------------------------------------------- numba


@njit
def _is_int_nb(data, a, b):
    if a < b and (data[a] == 43 or data[a] == 45):  # + or -
        a += 1
    if b <= a or b - a > _MAX_INT_DIGITS:
        return False
    for p in range(a, b):
        if data[p] < 48 or data[p] > 57:
            return False
    return True


@njit
def _field_nb(data, pos, n):
    """Parse one field at ``pos``: returns (content_lo, content_hi, next_pos, error)."""
    if pos < n and data[pos] == _QUOTE:
        p = pos + 1
        while True:
            if p >= n:
                return pos, p, p, ERR_UNTERMINATED
            c = data[p]
            if c == _QUOTE:
                if p + 1 < n and data[p + 1] == _QUOTE:
                    p += 2
                    continue
                break
            if c == _NL or c == _CR:
                return pos, p, p, ERR_EMBEDDED_NEWLINE
            p += 1
        a, b = pos + 1, p
        p += 1
        if p < n and data[p] != _COMMA and data[p] != _NL and data[p] != _CR:
            return a, b, p, ERR_QUOTE
        return a, b, p, OK
    p = pos
    while p < n:
        c = data[p]
        if c == _COMMA or c == _NL or c == _CR:
            break
        if c == _QUOTE:
            return pos, p, p, ERR_QUOTE
        p += 1
    return pos, p, p, OK


@njit
def _end_of_row_nb(data, p, n):
    """At a delimiter position: returns (next_pos, row_ended)."""
    if p >= n:
        return n, True
    c = data[p]
    if c == _COMMA:
        return p + 1, False
    if c == _CR and p + 1 < n and data[p + 1] == _NL:
        return p + 2, True
    return p + 1, True


@njit
def _scan_nb(data, start, ncols, group):
    n = data.shape[0]
    offsets = np.empty(64, dtype=np.int64)
    ngroups = 0
    is_int = np.ones(ncols, dtype=np.bool_)
    rows = 0
    pos = start
    while pos < n:
        row_start = pos
        col = 0
        ended = False
        while not ended:
            a, b, p, err = _field_nb(data, pos, n)
            if err != OK:
                return rows, offsets[:ngroups], is_int, err, p
            if col < ncols and not _is_int_nb(data, a, b):
                is_int[col] = False
            col += 1
            pos, ended = _end_of_row_nb(data, p, n)
        if col != ncols:
            return rows, offsets[:ngroups], is_int, ERR_WIDTH, row_start
        if rows % group == 0:
            if ngroups == offsets.shape[0]:
                grown = np.empty(2 * ngroups, dtype=np.int64)
                grown[:ngroups] = offsets
                offsets = grown
            offsets[ngroups] = row_start
            ngroups += 1
        rows += 1
    if rows == 0:
        is_int[:] = False
    return rows, offsets[:ngroups].copy(), is_int, OK, pos


@njit
def _locate_nb(data, skip, count, col):
    n = data.shape[0]
    lo = np.empty(count, dtype=np.int64)
    hi = np.empty(count, dtype=np.int64)
    pos = 0
    row = 0
    while row < skip + count:
        if pos >= n:
            return lo, hi, ERR_WIDTH, row
        c = 0
        ended = False
        while not ended:
            a, b, p, err = _field_nb(data, pos, n)
            if err != OK:
                return lo, hi, err, row
            if c == col and row >= skip:
                lo[row - skip] = a
                hi[row - skip] = b
            c += 1
            pos, ended = _end_of_row_nb(data, p, n)
        if c <= col:
            return lo, hi, ERR_WIDTH, row
        row += 1
    return lo, hi, OK, row


@njit
def _parse_int_nb(data, lo, hi, out):
    for i in range(lo.shape[0]):
        a = lo[i]
        b = hi[i]
        if not _is_int_nb(data, a, b):
            return i
        neg = data[a] == 45
        if data[a] == 43 or data[a] == 45:
            a += 1
        v = 0
        for p in range(a, b):
            v = v * 10 + (data[p] - 48)
        out[i] = -v if neg else v
    return -1


@njit
def _gather_nb(data, lo, hi, width, out):
    for i in range(lo.shape[0]):
        k = 0
        for p in range(lo[i], hi[i]):
            out[i, k] = data[p]
            k += 1


# --------------------------------------------------------------------- numpy

_INT_RE = re.compile(rb"[+-]?[0-9]{1,%d}\Z" % _MAX_INT_DIGITS)


def _split_rows(data: np.ndarray, start: int) -> tuple[np.ndarray, list[bytes]]:
    body = data[start:]
    newlines = np.flatnonzero(body == _NL)
    starts = np.concatenate([[0], newlines + 1]).astype(np.int64)
    if starts[-1] >= body.size:
        starts = starts[:-1]
    raw = body.tobytes()
    ends = np.concatenate([newlines, [body.size]])[: starts.size]
    lines = [raw[s:e].rstrip(b"\r") for s, e in zip(starts, ends)]
    return starts + start, lines


def _parse_line(line: bytes) -> tuple[list[bytes] | None, int]:
    if b"\r" in line:
        return None, ERR_EMBEDDED_NEWLINE
    text = line.decode("latin-1")
    try:
        fields = next(csv.reader(io.StringIO(text), strict=True))
    except csv.Error as exc:
        msg = str(exc)
        return None, ERR_UNTERMINATED if "EOF" in msg or "end" in msg else ERR_QUOTE
    except StopIteration:
        fields = [""]
    if line.count(b'"') % 2:
        return None, ERR_UNTERMINATED
    return [f.encode("latin-1") for f in fields], OK


def _scan_np(data, start, ncols, group):
    starts, lines = _split_rows(np.asarray(data), start)
    is_int = np.ones(ncols, dtype=bool)
    for row, line in enumerate(lines):
        fields, err = _parse_line(line)
        if err != OK:
            return row, starts[:row:group].copy(), is_int, err, int(starts[row])
        if len(fields) != ncols:
            return row, starts[:row:group].copy(), is_int, ERR_WIDTH, int(starts[row])
        for c, f in enumerate(fields):
            if is_int[c] and not _INT_RE.match(f):
                is_int[c] = False
    if not lines:
        is_int[:] = False
    return len(lines), starts[::group].copy(), is_int, OK, int(np.asarray(data).size)


def _column_np(data, skip, count, col):
    _, lines = _split_rows(np.asarray(data), 0)
    if len(lines) < skip + count:
        return None, ERR_WIDTH
    cells = []
    for line in lines[skip: skip + count]:
        fields, err = _parse_line(line)
        if err != OK:
            return None, err
        if len(fields) <= col:
            return None, ERR_WIDTH
        cells.append(fields[col])
    return cells, OK


# ------------------------------------------------------------------ dispatch


def scan(data: np.ndarray, start: int, ncols: int, group: int, use_numba: bool = USE_NUMBA):
    """Returns ``(rows, group_offsets, is_int, error, error_pos)``."""
    if use_numba:
        rows, offsets, is_int, err, pos = _scan_nb(data, start, ncols, group)
        return int(rows), offsets, is_int, int(err), int(pos)
    return _scan_np(data, start, ncols, group)


def _floats_from_cells(cells: list[bytes]) -> np.ndarray:
    out = np.empty(len(cells), dtype=np.float64)
    for i, cell in enumerate(cells):
        try:
            out[i] = float(cell)
        except ValueError:
            out[i] = np.nan
    return out


def parse_column(data: np.ndarray, skip: int, count: int, col: int, kind: str,
                 use_numba: bool = USE_NUMBA) -> tuple[np.ndarray | None, int]:
    """Parse ``count`` values of column ``col`` after skipping ``skip`` rows.

    ``kind`` is ``"int64"`` or ``"float64"``.  Unparsable float cells become
    NaN; an unparsable integer cell is an error.
    """
    if count == 0:
        return np.empty(0, dtype=kind), OK
    if not use_numba:
        cells, err = _column_np(data, skip, count, col)
        if err != OK:
            return None, err
        if kind == "int64":
            if not all(_INT_RE.match(c) for c in cells):
                return None, ERR_INT
            return np.array([int(c) for c in cells], dtype=np.int64), OK
        return _floats_from_cells(cells), OK

    lo, hi, err, _ = _locate_nb(data, skip, count, col)
    if err != OK:
        return None, int(err)
    if kind == "int64":
        out = np.empty(count, dtype=np.int64)
        bad = _parse_int_nb(data, lo, hi, out)
        return (None, ERR_INT) if bad >= 0 else (out, OK)
    width = int((hi - lo).max()) if count else 0
    if width == 0:
        return np.full(count, np.nan), OK
    raw = np.zeros((count, width), dtype=np.uint8)
    _gather_nb(data, lo, hi, width, raw)
    strings = raw.view(f"S{width}").reshape(count)
    try:
        return strings.astype(np.float64), OK
    except ValueError:
        return _floats_from_cells(list(strings)), OK
