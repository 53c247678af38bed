"""The fault service: object registry, chunk materialization and the service loop.

One service runs per core, in a child process forked at ``core_init``.  It is
the only mutator of the registry, the residency ledger and the write-back
caches.  Application requests arrive as pickled messages on a socket and are
answered synchronously; userfault events arrive on the userfaultfd.

Running the loop out of process keeps it independent of the application's
interpreter lock: a thread that faults while holding the GIL (plain numpy
indexing does) would otherwise block the very thread that has to serve it.
"""

from __future__ import annotations

import bisect
import logging
import os
import selectors
import signal
from dataclasses import dataclass, field
from multiprocessing import reduction
from typing import Any, Optional

import cloudpickle
import numpy as np

from . import store
from .errors import (CoreError, NestedUfoAccess, PopulateFailed, UfoFreed, UfoPoisoned,
                     UnresolvableFault)
from .fault import SHUTDOWN, TIMEOUT, FaultEvent, Region
from .layout import ChunkExtent, UfoConfig, UfoLayout, chunk_of_offset, compute_layout
from .store import ChunkCache, ChunkRecord, Counters, ResidencyLedger, WaterMarks

log = logging.getLogger("ufo.service")

# status board values, one byte per object id slot
LIVE = 1
POISONED = 2
FREED = 3
BOARD_SIZE = 1 << 20

_active: Optional["FaultService"] = None


def active_service() -> Optional["FaultService"]:
    """The service running in this process, if this is a service process."""
    return _active


@dataclass
class ObjectRecord:
    id: int
    config: UfoConfig
    layout: UfoLayout
    region: Region
    cache: ChunkCache
    status: str = "live"
    error: Optional[str] = None
    populate_calls: int = 0
    hash_calls: int = 0

    @property
    def read_only(self) -> bool:
        return self.config.read_only

    def chunk(self, ordinal: int) -> ChunkExtent:
        return self.layout.extent(ordinal)


class ObjectRegistry:
    """Live objects keyed by region base; lookup by any contained address."""

    def __init__(self) -> None:
        self._bases: list[int] = []
        self._by_base: dict[int, ObjectRecord] = {}
        self._by_id: dict[int, ObjectRecord] = {}

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self):
        return iter(list(self._by_id.values()))

    def add(self, obj: ObjectRecord) -> None:
        base, end = obj.region.base, obj.region.base + obj.region.length
        i = bisect.bisect_left(self._bases, base)
        if i > 0:
            prev = self._by_base[self._bases[i - 1]]
            if prev.region.base + prev.region.length > base:
                raise ValueError(f"region {base:#x} overlaps object {prev.id}")
        if i < len(self._bases) and self._bases[i] < end:
            raise ValueError(f"region {base:#x} overlaps object {self._by_base[self._bases[i]].id}")
        if obj.id in self._by_id:
            raise ValueError(f"object id {obj.id} already registered")
        self._bases.insert(i, base)
        self._by_base[base] = obj
        self._by_id[obj.id] = obj

    def remove(self, obj: ObjectRecord) -> None:
        i = bisect.bisect_left(self._bases, obj.region.base)
        del self._bases[i]
        del self._by_base[obj.region.base]
        del self._by_id[obj.id]

    def get(self, object_id: int) -> ObjectRecord:
        try:
            return self._by_id[object_id]
        except KeyError:
            raise UfoFreed(f"no live object with id {object_id}") from None

    def lookup(self, address: int) -> Optional[ObjectRecord]:
        i = bisect.bisect_right(self._bases, address) - 1
        if i < 0:
            return None
        obj = self._by_base[self._bases[i]]
        return obj if obj.region.contains(address) else None


@dataclass
class ServiceParams:
    marks: WaterMarks
    tmpdir: Optional[str] = None
    abort_on_populate_error: bool = False


class FaultService:
    def __init__(self, backend, params: ServiceParams, board=None, app_pid: Optional[int] = None):
        self.backend = backend
        self.params = params
        self.marks = params.marks
        self.board = board
        self.app_pid = app_pid
        self.registry = ObjectRegistry()
        self.ledger = ResidencyLedger()
        self.counters = Counters()
        self._populating: Optional[int] = None
        self._stopping = False

    # ------------------------------------------------------------ objects

    def create(self, object_id: int, config: UfoConfig, region: Region) -> UfoLayout:
        layout = compute_layout(config, self.backend.page)
        self.backend.register(region)
        obj = ObjectRecord(object_id, config, layout, region,
                           ChunkCache(max(layout.chunk_count, 1), self.params.tmpdir))
        try:
            self.registry.add(obj)
        except ValueError:
            self.backend.unregister(region)
            raise
        self._set_board(object_id, LIVE)
        log.debug("created object %d: %d x %d bytes at %#x", object_id,
                  config.element_count, config.element_size, region.base)
        return layout

    def free(self, object_id: int) -> int:
        obj = self.registry.get(object_id)
        dropped = self.ledger.drop_object(object_id)
        self.backend.unregister(obj.region)
        os.close(obj.region.fd)
        obj.cache.close()
        self.registry.remove(obj)
        self._set_board(object_id, FREED)
        log.debug("freed object %d (%d resident chunks dropped)", object_id, len(dropped))
        return sum(r.length for r in dropped)

    def _set_board(self, object_id: int, value: int) -> None:
        if self.board is not None:
            self.board[object_id % BOARD_SIZE] = value

    def _poison(self, obj: ObjectRecord, reason: str) -> None:
        if obj.status != "poisoned":
            obj.status = "poisoned"
            obj.error = reason
            self._set_board(obj.id, POISONED)
        log.error("object %d poisoned: %s", obj.id, reason)
        if self.params.abort_on_populate_error:
            log.critical("aborting on population failure of object %d", obj.id)
            if self.app_pid:
                os.kill(self.app_pid, signal.SIGABRT)
            os._exit(1)

    # ---------------------------------------------------- materialization

    def resolve(self, address: int) -> tuple[ObjectRecord, ChunkExtent]:
        obj = self.registry.lookup(address)
        if obj is None:
            raise UnresolvableFault(f"fault at {address:#x} is in no registered object")
        offset = address - obj.region.base
        if offset >= obj.layout.total_reserved:
            raise UnresolvableFault(
                f"fault at offset {offset} beyond the {obj.layout.total_reserved}-byte "
                f"extent of object {obj.id}")
        return obj, chunk_of_offset(obj.layout, offset)

    def _call_populate(self, obj: ObjectRecord, lo: int, hi: int, target: np.ndarray) -> None:
        populate = obj.config.populate
        if populate is None:
            return
        user_data = obj.config.user_data
        pretouch = getattr(populate, "pretouch", None)
        if pretouch is not None:
            # pulls inputs through the normal fault path, outside the guard
            try:
                user_data = pretouch(lo, hi, user_data, self.read_elements)
            except Exception as exc:
                raise PopulateFailed(f"reading inputs failed: {type(exc).__name__}: {exc}") from exc
        outer, self._populating = self._populating, obj.id
        obj.populate_calls += 1
        self.counters.populate_calls += 1
        try:
            status = populate(lo, hi, user_data, target)
        except NestedUfoAccess as exc:
            raise PopulateFailed(f"nested-ufo-access: {exc}") from exc
        except Exception as exc:
            raise PopulateFailed(f"populate raised {type(exc).__name__}: {exc}") from exc
        finally:
            self._populating = outer
        if status not in (None, 0):
            raise PopulateFailed(f"populate returned status {status} for elements [{lo}, {hi})")

    def materialize_chunk(self, obj: ObjectRecord, ext: ChunkExtent) -> tuple[np.ndarray, Optional[bytes]]:
        """Produce a chunk's window bytes from the cache or the population function."""
        ordinal = ext.byte_lo // obj.layout.chunk_size
        window = obj.cache.read(ordinal, ext.byte_lo, ext.length)
        if window is not None:
            self.counters.cache_hits += 1
        else:
            window = np.zeros(ext.length, dtype=np.uint8)
            if not ext.header and ext.elem_hi > ext.elem_lo and obj.status == "live":
                try:
                    self._populate_window(obj, ext, window)
                except PopulateFailed as exc:
                    window[:] = 0
                    self._poison(obj, str(exc))
        digest = None
        if not obj.read_only:
            digest = store.hash_window(window)
            self.counters.hash_calls += 1
            obj.hash_calls += 1
        return window, digest

    def _populate_window(self, obj: ObjectRecord, ext: ChunkExtent, window: np.ndarray) -> None:
        layout = obj.layout
        e = layout.element_size
        lo, hi = ext.elem_lo, ext.elem_hi
        src = layout.body_start + lo * e
        nbytes = (hi - lo) * e
        if src == ext.byte_lo and nbytes <= ext.length:
            self._call_populate(obj, lo, hi, window[:nbytes])
            return
        # straddling elements: populate the covering range, copy out the window
        staging = np.zeros(nbytes, dtype=np.uint8)
        self._call_populate(obj, lo, hi, staging)
        a = max(src, ext.byte_lo)
        b = min(src + nbytes, ext.byte_hi)
        window[a - ext.byte_lo:b - ext.byte_lo] = staging[a - src:b - src]

    def ensure_resident(self, obj: ObjectRecord, ext: ChunkExtent) -> ChunkRecord:
        ordinal = ext.byte_lo // obj.layout.chunk_size
        key = (obj.id, ordinal)
        if key in self.ledger:
            return next(r for r in self.ledger if r.key == key)
        if self._populating is not None:
            raise NestedUfoAccess(
                f"population of object {self._populating} touched unmaterialized "
                f"chunk {ordinal} of object {obj.id}")
        window, digest = self.materialize_chunk(obj, ext)
        if key in self.ledger:
            # a pretouch of this very chunk's inputs materialized it already
            return next(r for r in self.ledger if r.key == key)
        self.backend.install(obj.region, ext.byte_lo, window)
        record = ChunkRecord(obj.id, ordinal, ext.byte_lo, ext.length, digest)
        self.ledger.note_materialized(record)
        self.counters.installs += 1
        self.counters.peak_resident = max(self.counters.peak_resident, self.ledger.resident_bytes)
        self.collect(pinned=[key])
        return record

    def collect(self, pinned=()) -> list[ChunkRecord]:
        evicted = store.maybe_collect(self.ledger, self.marks, self._dematerialize, pinned)
        if evicted:
            self.counters.collections += 1
            self.counters.collection_ends.append(self.ledger.resident_bytes)
            log.debug("collected %d chunks, %d bytes resident", len(evicted), self.ledger.resident_bytes)
        return evicted

    def _dematerialize(self, record: ChunkRecord) -> None:
        obj = self.registry.get(record.object_id)
        try:
            store.dematerialize(obj, record, self.backend, self.counters)
        except OSError as exc:
            self._poison(obj, f"write-back of chunk {record.ordinal} failed: {exc}")
            self.backend.reclaim(obj.region, record.byte_lo, record.length)

    def handle_fault(self, event: FaultEvent) -> None:
        self.counters.faults += 1
        try:
            obj, ext = self.resolve(event.address)
        except UnresolvableFault as exc:
            self._answer_stray_fault(event, exc)
            return
        ordinal = ext.byte_lo // obj.layout.chunk_size
        if (obj.id, ordinal) in self.ledger:
            # a second thread raced on a chunk that is already installed
            if hasattr(self.backend, "wake"):
                self.backend.wake(obj.region, ext.byte_lo, ext.length)
            return
        self.ensure_resident(obj, ext)

    def _answer_stray_fault(self, event: FaultEvent, exc: Exception) -> None:
        log.error("%s", exc)
        obj = self.registry.lookup(event.address)
        if obj is not None and not isinstance(exc, UnresolvableFault):
            self._poison(obj, f"fault service error: {exc}")
        if obj is not None:
            # answer with a zero page so the faulting thread resumes
            page = self.backend.page
            offset = (event.address - obj.region.base) // page * page
            try:
                self.backend.install(obj.region, offset, np.zeros(page, dtype=np.uint8))
            except OSError:
                log.exception("could not answer fault at %#x", event.address)

    # --------------------------------------------------------- byte access

    def _chunks_covering(self, obj: ObjectRecord, byte_lo: int, byte_hi: int):
        C = obj.layout.chunk_size
        for ordinal in range(byte_lo // C, -(-byte_hi // C)):
            yield obj.chunk(ordinal)

    def read_bytes(self, object_id: int, byte_lo: int, byte_hi: int) -> np.ndarray:
        """Bytes ``[byte_lo, byte_hi)`` of an object, materializing as needed."""
        obj = self.registry.get(object_id)
        out = np.empty(max(byte_hi - byte_lo, 0), dtype=np.uint8)
        for ext in self._chunks_covering(obj, byte_lo, byte_hi):
            self.ensure_resident(obj, ext)
            a, b = max(byte_lo, ext.byte_lo), min(byte_hi, ext.byte_hi)
            self.backend.read(obj.region, a, b - a, out[a - byte_lo:b - byte_lo])
        return out

    def write_bytes(self, object_id: int, byte_lo: int, data) -> None:
        obj = self.registry.get(object_id)
        data = np.frombuffer(bytes(data), dtype=np.uint8)
        byte_hi = byte_lo + data.size
        for ext in self._chunks_covering(obj, byte_lo, byte_hi):
            self.ensure_resident(obj, ext)
            a, b = max(byte_lo, ext.byte_lo), min(byte_hi, ext.byte_hi)
            self.backend.write(obj.region, a, data[a - byte_lo:b - byte_lo])

    def read_elements(self, handle, lo: int, hi: int) -> np.ndarray:
        """Elements ``[lo, hi)`` of another object, as a typed array."""
        object_id = getattr(handle, "id", handle)
        obj = self.registry.get(object_id)
        if obj.status == "poisoned":
            raise UfoPoisoned(obj.id, obj.error)
        L = obj.layout
        raw = self.read_bytes(object_id, L.body_start + lo * L.element_size,
                              L.body_start + hi * L.element_size)
        if obj.status == "poisoned":
            raise UfoPoisoned(obj.id, obj.error)
        dtype = obj.config.dtype if obj.config.dtype is not None else np.dtype(f"V{L.element_size}")
        return raw.view(dtype)

    def ensure_range(self, object_id: int, byte_lo: int, byte_hi: int) -> None:
        """Materialize every chunk overlapping ``[byte_lo, byte_hi)``."""
        obj = self.registry.get(object_id)
        for ext in self._chunks_covering(obj, byte_lo, byte_hi):
            self.ensure_resident(obj, ext)

    def evict(self, object_id: Optional[int] = None) -> int:
        """Dematerialize every resident chunk (of one object, or of all)."""
        victims = [r for r in self.ledger if object_id is None or r.object_id == object_id]
        for record in victims:
            self.ledger.remove(record.key)
            self._dematerialize(record)
        return len(victims)

    # ------------------------------------------------------------- queries

    def stats(self) -> dict:
        return {
            "counters": self.counters.snapshot(),
            "resident_bytes": self.ledger.resident_bytes,
            "resident_chunks": len(self.ledger),
            "objects": len(self.registry),
            "marks": self.marks,
            "backend": self.backend.name,
        }

    def object_stats(self, object_id: int) -> dict:
        obj = self.registry.get(object_id)
        records = self.ledger.records_for(object_id)
        return {
            "status": obj.status,
            "error": obj.error,
            "populate_calls": obj.populate_calls,
            "hash_calls": obj.hash_calls,
            "resident_chunks": [r.ordinal for r in records],
            "resident_bytes": sum(r.length for r in records),
            "cached_chunks": int(obj.cache.present.sum()),
            "cache_disk_bytes": obj.cache.disk_bytes(),
        }

    def status(self, object_id: int) -> tuple[str, Optional[str]]:
        obj = self.registry.get(object_id)
        return obj.status, obj.error

    def shutdown(self) -> None:
        for obj in self.registry:
            try:
                self.free(obj.id)
            except Exception:  # pragma: no cover - best effort teardown
                log.exception("freeing object %d during shutdown", obj.id)
        self._stopping = True

    # ---------------------------------------------------------------- loop

    def drain_faults(self) -> None:
        while True:
            event = self.backend.next_event(0)
            if event == TIMEOUT:
                return
            if event == SHUTDOWN:
                self._stopping = True
                return
            try:
                self.handle_fault(event)
            except Exception as exc:
                # never leave the faulting thread blocked
                log.exception("serving fault at %#x failed", event.address)
                self._answer_stray_fault(event, exc)

    def run(self, conn) -> None:
        """Serve faults and API messages until shutdown or the application goes away."""
        global _active
        _active = self
        sel = selectors.DefaultSelector()
        sel.register(conn.fileno(), selectors.EVENT_READ, "api")
        if self.backend.fileno() is not None:
            sel.register(self.backend.fileno(), selectors.EVENT_READ, "fault")
        try:
            while not self._stopping:
                for key, _ in sel.select():
                    if key.data == "fault":
                        self.drain_faults()
                    else:
                        try:
                            payload = conn.recv_bytes()
                        except (EOFError, OSError):
                            log.debug("application closed the channel; shutting down")
                            self.shutdown()
                            break
                        self._dispatch(conn, payload)
                    if self._stopping:
                        break
        finally:
            _active = None
            sel.close()

    def _dispatch(self, conn, payload: bytes) -> None:
        op, args = cloudpickle.loads(payload)
        try:
            if op == "new":
                object_id, config, base, length = args
                fd = reduction.recv_handle(conn)
                result = self.create(object_id, config, Region(base, length, fd))
            else:
                result = getattr(self, _OPS[op])(*args)
            reply = ("ok", result)
        except Exception as exc:
            reply = ("err", exc)
        try:
            data = cloudpickle.dumps(reply)
        except Exception as exc:  # unpicklable exception payload
            data = cloudpickle.dumps(("err", CoreError(f"{type(exc).__name__}: {reply[1]!r}")))
        conn.send_bytes(data)

    def soft_fault(self, address: int, kind: str = "unknown") -> None:
        self.backend.post_fault(address, kind)
        self.drain_faults()


_OPS = {
    "ensure": "ensure_range",
    "free": "free",
    "evict": "evict",
    "stats": "stats",
    "object_stats": "object_stats",
    "status": "status",
    "read_bytes": "read_bytes",
    "write_bytes": "write_bytes",
    "soft_fault": "soft_fault",
    "shutdown": "shutdown",
    "ping": "_ping",
}


def _ping(self) -> str:
    return "pong"


FaultService._ping = _ping


def serve(conn, backend, params: ServiceParams, board, app_pid: int, close_fds=()) -> None:
    """Entry point of the forked service process."""
    for fd in close_fds:
        try:
            os.close(fd)
        except OSError:
            pass
    signal.signal(signal.SIGINT, signal.SIG_IGN)
    _configure_logging()
    service = FaultService(backend, params, board, app_pid)
    try:
        service.run(conn)
    finally:
        backend.close()
        conn.close()


def _configure_logging() -> None:
    level = os.environ.get("UFO_LOG")
    if level:
        logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                            format="ufo[%(process)d] %(levelname)s %(name)s: %(message)s")
