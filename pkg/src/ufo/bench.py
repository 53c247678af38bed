"""Create/sum/loop microbenchmarks over eager arrays and objects.

Every op runs ``iters`` times.  Before each iteration the object (or eager
array) is created afresh outside the timed region, except for ``create``
whose timed region is exactly allocate plus free.  Times are monotonic
nanoseconds.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .api import Core, CoreParams
from .backends import file_config, seq_config
from .chunked import ChunkPlan, reduce_chunks
from .kernels import USE_NUMBA, njit

OPS = ("create", "sum", "loop")
BACKENDS = ("file", "seq")
MODES = ("eager", "ufo", "ufo_ro")
PATTERNS = ("index", "constant", "random")
FIELDS = ("benchmark", "backend", "mode", "iteration", "nanos")

DESK_SIZE = 256 << 20
DESK_HIGH = 32 << 20
DESK_LOW = 16 << 20
DESK_ITERS = 10

_GEN_BLOCK = 1 << 22  # elements per write


@dataclass(frozen=True)
class BenchRecord:
    benchmark: str
    backend: str
    mode: str
    iteration: int
    nanos: int

    def row(self) -> tuple:
        return (self.benchmark, self.backend, self.mode, self.iteration, self.nanos)


@dataclass
class BenchResult:
    records: list = field(default_factory=list)
    checks: list = field(default_factory=list)  # per-iteration sum/loop results
    counters: Optional[object] = None


class BenchError(ValueError):
    pass


# ------------------------------------------------------------------ gen-file


def gen_file(path, count: int, pattern: str = "index", seed: int = 0, value: int = 5) -> None:
    """Write ``count`` little-endian int32 elements; deterministic for a seed."""
    if pattern not in PATTERNS:
        raise BenchError(f"unknown pattern {pattern!r}; expected one of {', '.join(PATTERNS)}")
    if count < 0:
        raise BenchError("count must be >= 0")
    rng = np.random.default_rng(seed)
    le = np.dtype("<i4")
    with open(path, "wb") as fh:
        for lo in range(0, count, _GEN_BLOCK):
            hi = min(lo + _GEN_BLOCK, count)
            if pattern == "index":
                block = np.arange(lo, hi, dtype=np.int64).astype(le)
            elif pattern == "constant":
                block = np.full(hi - lo, value, dtype=le)
            else:
                block = rng.integers(-(1 << 31), 1 << 31, size=hi - lo, dtype=np.int32).astype(le)
            fh.write(block.tobytes())


# -------------------------------------------------------------------- kernels


@njit
def _identity_loop_nb(src):
    acc = 0
    for i in range(src.shape[0]):
        x = src[i]
        acc += x
    return acc


def _identity_loop_np(src):
    # one element at a time, like the compiled loop; slow by design
    acc = 0
    for x in src:
        acc += int(x)
    return acc


def identity_loop(src: np.ndarray, use_numba: bool = USE_NUMBA) -> int:
    """Touch every element in order; returns their sum as a checksum."""
    return int(_identity_loop_nb(src) if use_numba else _identity_loop_np(src))


# ---------------------------------------------------------------------- runs


def _eager_array(backend: str, n: int, path: Optional[str]) -> np.ndarray:
    if backend == "seq":
        return np.arange(1, n + 1, dtype=np.int32)
    return np.fromfile(path, dtype="<i4", count=n)


def _config(backend: str, mode: str, n: int, path: Optional[str], chunk_size: int):
    read_only = mode == "ufo_ro"
    if backend == "seq":
        return seq_config(1, n, dtype=np.int32, read_only=read_only, chunk_size=chunk_size)
    return file_config(path, np.int32, count=n, read_only=read_only, chunk_size=chunk_size)


def _loop_ufo(handle, soft: bool) -> int:
    if not soft:
        return identity_loop(handle.asarray())
    return sum(identity_loop(handle.read_range(lo, hi)) for lo, hi in ChunkPlan.for_handle(handle))


def self_check(core: Core) -> int:
    """Sum of the object 1..10; must be 55."""
    h = core.new(seq_config(1, 10, read_only=True))
    try:
        total = reduce_chunks(h, np.add, 0)
    finally:
        h.free()
    if total != 55:
        raise BenchError(f"harness self-check failed: sum(1..10) = {total}")
    return total


def run_bench(op: str, backend: str, mode: str, size_bytes: int = DESK_SIZE,
              iters: int = DESK_ITERS, chunk_size: int = 1 << 20, high_water: int = DESK_HIGH,
              low_water: int = DESK_LOW, path: Optional[str] = None,
              core: Optional[Core] = None) -> BenchResult:
    if op not in OPS:
        raise BenchError(f"unknown benchmark {op!r}")
    if backend not in BACKENDS:
        raise BenchError(f"unknown backend {backend!r}")
    if mode not in MODES:
        raise BenchError(f"unknown mode {mode!r}")
    n = size_bytes // 4
    if backend == "file":
        if not path:
            raise BenchError("the file backend needs --path (see gen-file)")
        if not os.path.exists(path):
            raise BenchError(f"input file {path} does not exist; create it with gen-file")
        if os.path.getsize(path) < n * 4:
            raise BenchError(f"{path} holds {os.path.getsize(path)} bytes, {n * 4} needed")

    result = BenchResult()
    if op == "loop":
        identity_loop(np.zeros(4, dtype=np.int32))  # compile outside the timed region
    own_core = core is None and mode != "eager"
    if own_core:
        core = Core(CoreParams.from_env(high_water=high_water, low_water=low_water,
                                        chunk_size=chunk_size))
    try:
        if core is not None and op == "sum":
            self_check(core)
        for it in range(iters):
            nanos, check = _one_iteration(op, backend, mode, n, path, chunk_size, core)
            result.records.append(BenchRecord(op, backend, mode, it, nanos))
            result.checks.append(check)
        if core is not None:
            result.counters = core.stats()["counters"]
    finally:
        if own_core:
            core.shutdown()
    return result


def _one_iteration(op, backend, mode, n, path, chunk_size, core):
    clock = time.perf_counter_ns
    if mode == "eager":
        if op == "create":
            t0 = clock()
            arr = _eager_array(backend, n, path)
            del arr
            return clock() - t0, None
        arr = _eager_array(backend, n, path)
        t0 = clock()
        check = int(arr.sum(dtype=np.int64)) if op == "sum" else identity_loop(arr)
        elapsed = clock() - t0
        del arr
        return elapsed, check

    config = _config(backend, mode, n, path, chunk_size)
    if op == "create":
        t0 = clock()
        h = core.new(config)
        h.free()
        return clock() - t0, None
    h = core.new(config)
    try:
        t0 = clock()
        check = reduce_chunks(h, np.add, 0) if op == "sum" else _loop_ufo(h, core._soft)
        elapsed = clock() - t0
    finally:
        h.free()
    return elapsed, check


def write_records(records: Iterable[BenchRecord], out) -> None:
    """Append rows to a CSV file (header only when the file is new), or a stream."""
    if hasattr(out, "write"):
        w = csv.writer(out)
        w.writerow(FIELDS)
        w.writerows(r.row() for r in records)
        return
    new = not os.path.exists(out) or os.path.getsize(out) == 0
    with open(out, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(FIELDS)
        w.writerows(r.row() for r in records)
