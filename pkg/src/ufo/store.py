"""Residency accounting, watermark eviction, dirty detection and write-back caches."""

from __future__ import annotations

import os
import tempfile
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .kernels import blake3

DIGEST_SIZE = 32


class StoreError(RuntimeError):
    pass


class DuplicateChunk(StoreError):
    pass


def hash_window(data) -> bytes:
    """BLAKE3-256 digest of a byte window."""
    return blake3.digest(data, DIGEST_SIZE)


@dataclass(frozen=True)
class WaterMarks:
    high: int
    low: int

    def __post_init__(self) -> None:
        if not 0 < self.low < self.high:
            raise ValueError(f"water marks need 0 < low < high, got low={self.low}, high={self.high}")


@dataclass
class ChunkRecord:
    object_id: int
    ordinal: int
    byte_lo: int
    length: int
    digest: Optional[bytes] = None

    @property
    def key(self) -> tuple[int, int]:
        return (self.object_id, self.ordinal)


class ResidencyLedger:
    """Materialized chunks, oldest first, with a running byte total.

    ``collections.deque`` serves as the circular buffer.
    """

    def __init__(self) -> None:
        self._queue: deque[ChunkRecord] = deque()
        self._keys: set[tuple[int, int]] = set()
        self.resident_bytes = 0

    def __len__(self) -> int:
        return len(self._queue)

    def __iter__(self):
        return iter(self._queue)

    def __contains__(self, key) -> bool:
        return key in self._keys

    def note_materialized(self, record: ChunkRecord) -> None:
        if record.key in self._keys:
            raise DuplicateChunk(f"chunk {record.key} is already resident")
        self._queue.append(record)
        self._keys.add(record.key)
        self.resident_bytes += record.length

    def oldest(self) -> Optional[ChunkRecord]:
        return self._queue[0] if self._queue else None

    def pop_oldest(self) -> ChunkRecord:
        record = self._queue.popleft()
        self._keys.discard(record.key)
        self.resident_bytes -= record.length
        return record

    def remove(self, key: tuple[int, int]) -> Optional[ChunkRecord]:
        if key not in self._keys:
            return None
        for i, record in enumerate(self._queue):
            if record.key == key:
                del self._queue[i]
                self._keys.discard(key)
                self.resident_bytes -= record.length
                return record
        raise StoreError(f"ledger index out of sync for {key}")  # pragma: no cover

    def drop_object(self, object_id: int) -> list[ChunkRecord]:
        dropped = [r for r in self._queue if r.object_id == object_id]
        if dropped:
            self._queue = deque(r for r in self._queue if r.object_id != object_id)
            for r in dropped:
                self._keys.discard(r.key)
                self.resident_bytes -= r.length
        return dropped

    def records_for(self, object_id: int) -> list[ChunkRecord]:
        return [r for r in self._queue if r.object_id == object_id]


def maybe_collect(
    ledger: ResidencyLedger,
    marks: WaterMarks,
    dematerialize: Callable[[ChunkRecord], None],
    pinned: Iterable[tuple[int, int]] = (),
) -> list[ChunkRecord]:
    """Evict oldest-first from ``ledger`` once it exceeds ``marks.high``.

    Runs until resident bytes are at or below ``marks.low``.  Pinned chunks
    (the one whose fault is being served) keep their queue position and are
    never evicted; when only pinned chunks remain the collection stops early.
    """
    if ledger.resident_bytes <= marks.high:
        return []
    pinned = set(pinned)
    evicted: list[ChunkRecord] = []
    while ledger.resident_bytes > marks.low:
        victim = next((r for r in ledger if r.key not in pinned), None)
        if victim is None:
            break
        ledger.remove(victim.key)
        dematerialize(victim)
        evicted.append(victim)
    return evicted


class ChunkCache:
    """Per-object anonymous write-back file.

    Chunk ``k``'s bytes live at file offset ``byte_lo(k)``; the file is sparse
    and unlinked from creation, so it disappears with its descriptor.
    """

    def __init__(self, chunk_count: int, tmpdir: Optional[str] = None) -> None:
        self.tmpdir = tmpdir
        self.present = np.zeros(chunk_count, dtype=bool)
        self._file = None

    @property
    def fd(self) -> Optional[int]:
        return self._file.fileno() if self._file is not None else None

    def _ensure_file(self) -> int:
        if self._file is None:
            if self.tmpdir:
                os.makedirs(self.tmpdir, exist_ok=True)
            self._file = tempfile.TemporaryFile(dir=self.tmpdir, prefix="ufo-cache-")
        return self._file.fileno()

    def read(self, ordinal: int, byte_lo: int, length: int) -> Optional[np.ndarray]:
        if not self.present[ordinal]:
            return None
        out = np.empty(length, dtype=np.uint8)
        got = 0
        while got < length:
            n = os.preadv(self.fd, [memoryview(out[got:])], byte_lo + got)
            if n <= 0:
                raise StoreError(f"short read from cache slot {ordinal} ({got} of {length} bytes)")
            got += n
        return out

    def write(self, ordinal: int, byte_lo: int, data: np.ndarray) -> None:
        fd = self._ensure_file()
        view = memoryview(np.ascontiguousarray(data, dtype=np.uint8))
        done = 0
        while done < len(view):
            done += os.pwritev(fd, [view[done:]], byte_lo + done)
        self.present[ordinal] = True

    def disk_bytes(self) -> int:
        """Bytes actually allocated on disk for this cache."""
        if self._file is None:
            return 0
        return os.fstat(self.fd).st_blocks * 512

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


@dataclass
class Counters:
    populate_calls: int = 0
    hash_calls: int = 0
    cache_writes: int = 0
    cache_hits: int = 0
    installs: int = 0
    faults: int = 0
    evictions: int = 0
    collections: int = 0
    peak_resident: int = 0
    collection_ends: list = field(default_factory=list)

    def snapshot(self) -> "Counters":
        return Counters(**{**self.__dict__, "collection_ends": list(self.collection_ends)})


def dematerialize(obj, record: ChunkRecord, backend, counters: Counters) -> bool:
    """Write a chunk back if dirty, then release its pages.

    ``obj`` needs ``region``, ``read_only`` and ``cache``.  Returns whether the
    chunk was written to the cache.
    """
    wrote = False
    if not obj.read_only:
        window = backend.read(obj.region, record.byte_lo, record.length)
        counters.hash_calls += 1
        if hasattr(obj, "hash_calls"):
            obj.hash_calls += 1
        if hash_window(window) != record.digest:
            obj.cache.write(record.ordinal, record.byte_lo, window)
            counters.cache_writes += 1
            wrote = True
    backend.reclaim(obj.region, record.byte_lo, record.length)
    counters.evictions += 1
    return wrote
