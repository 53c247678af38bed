"""Application-side API: core lifecycle, object creation and accessor helpers.

A :class:`Core` owns one fault service (a forked child process) and talks to
it over a socket.  Objects are memory regions in this process; touching
their memory is enough to materialize it when the userfault backend is in
use.  The accessor helpers (:meth:`UfoHandle.read`, ``write``, ``asarray``
and friends) work with every backend.
"""

from __future__ import annotations

import itertools
import logging
import mmap
import multiprocessing
import os
import threading
import warnings
from dataclasses import dataclass, replace
from multiprocessing import reduction
from typing import Optional

import cloudpickle
import numpy as np

from . import service as _service
from .errors import CoreError, UfoFreed, UfoPoisoned
from .fault import Region, make_backend, map_region, unmap_region
from .layout import DEFAULT_CHUNK_SIZE, LayoutError, UfoConfig, UfoLayout, compute_layout, page_size
from .store import WaterMarks

log = logging.getLogger("ufo")

DEFAULT_HIGH_WATER = 2 << 30
DEFAULT_LOW_WATER = 1 << 30


class ReadOnlyWriteWarning(UserWarning):
    """A write landed in a read-only object; it will not survive eviction."""


def _env_int(name: str) -> Optional[int]:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw, 0)
    except ValueError:
        raise ValueError(f"{name}={raw!r} is not an integer") from None


@dataclass(frozen=True)
class CoreParams:
    high_water: int = DEFAULT_HIGH_WATER
    low_water: int = DEFAULT_LOW_WATER
    chunk_size: int = DEFAULT_CHUNK_SIZE
    backend: str = "auto"
    tmpdir: Optional[str] = None
    abort_on_populate_error: bool = False

    def __post_init__(self) -> None:
        WaterMarks(self.high_water, self.low_water)
        page = page_size()
        if self.chunk_size <= 0 or self.chunk_size % page:
            raise LayoutError(f"chunk size must be a positive multiple of {page}, got {self.chunk_size}")

    @property
    def marks(self) -> WaterMarks:
        return WaterMarks(self.high_water, self.low_water)

    @classmethod
    def from_env(cls, **overrides) -> "CoreParams":
        """Defaults, then ``UFO_*`` environment variables, then ``overrides``."""
        values = {}
        for key, var in (("high_water", "UFO_HIGH_WATER"), ("low_water", "UFO_LOW_WATER"),
                         ("chunk_size", "UFO_CHUNK_SIZE")):
            v = _env_int(var)
            if v is not None:
                values[key] = v
        if os.environ.get("UFO_BACKEND"):
            values["backend"] = os.environ["UFO_BACKEND"]
        if os.environ.get("UFO_TMPDIR"):
            values["tmpdir"] = os.environ["UFO_TMPDIR"]
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


_current: Optional["Core"] = None
_current_lock = threading.Lock()


def _warm_kernels() -> None:
    # compile (or load from cache) before fork so the service inherits them
    from .backends import _seq_fill
    from .kernels import blake3
    blake3.digest(np.zeros(2048, dtype=np.uint8))
    for dt in (np.int32, np.int64):
        _seq_fill(np.empty(2, dtype=dt), np.int64(0), np.int64(1), np.int64(1))


class Core:
    """A live framework instance.  Use :func:`core_init` or ``Core(params)``."""

    def __init__(self, params: Optional[CoreParams] = None) -> None:
        global _current
        params = params if params is not None else CoreParams.from_env()
        with _current_lock:
            if _current is not None and _current.live:
                raise CoreError("a core is already initialized in this process")
            self.params = params
            self._lock = threading.RLock()
            self._ids = itertools.count(1)
            self._handles: dict[int, UfoHandle] = {}
            self.read_only_writes = 0
            self.live = False
            self._start()
            _current = self

    def _start(self) -> None:
        _warm_kernels()
        backend = make_backend(self.params.backend)
        self.backend_name = backend.name
        self._soft = backend.name != "userfault"
        self._board = mmap.mmap(-1, _service.BOARD_SIZE)
        ctx = multiprocessing.get_context("fork")
        self._conn, child = ctx.Pipe(duplex=True)
        sparams = _service.ServiceParams(self.params.marks, self.params.tmpdir,
                                         self.params.abort_on_populate_error)
        self._proc = ctx.Process(target=_service.serve, name="ufo-service", daemon=True,
                                 args=(child, backend, sparams, self._board, os.getpid(),
                                       (self._conn.fileno(),)))
        self._proc.start()
        child.close()
        backend.close_application_side()
        backend.close()
        self.live = True
        self._call("ping")

    # ------------------------------------------------------------ plumbing

    def _call(self, op: str, *args, fd: Optional[int] = None):
        if not self.live:
            raise CoreError("core has been shut down")
        with self._lock:
            try:
                self._conn.send_bytes(cloudpickle.dumps((op, args)))
                if fd is not None:
                    reduction.send_handle(self._conn, fd, self._proc.pid)
                status, result = cloudpickle.loads(self._conn.recv_bytes())
            except (EOFError, OSError) as exc:
                self._mark_dead()
                raise CoreError(f"fault service is gone ({exc})") from exc
        if status == "err":
            raise result
        return result

    def _mark_dead(self) -> None:
        self.live = False
        try:
            self._conn.close()
        except OSError:
            pass

    def __enter__(self) -> "Core":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    def __repr__(self) -> str:
        state = "live" if self.live else "shut down"
        return f"<Core {state} backend={self.backend_name} objects={len(self._handles)}>"

    # ------------------------------------------------------------- objects

    def new(self, config: UfoConfig) -> "UfoHandle":
        """Create an object.  No population happens until its memory is read."""
        if self.params.chunk_size != DEFAULT_CHUNK_SIZE and config.chunk_size == DEFAULT_CHUNK_SIZE:
            config = replace(config, chunk_size=self.params.chunk_size)
        layout = compute_layout(config)
        if not self.live:
            raise CoreError("core has been shut down")
        region = map_region(max(layout.total_reserved, layout.page_size))
        object_id = next(self._ids)
        try:
            self._call("new", object_id, config, region.base, region.length, fd=region.fd)
        except BaseException:
            unmap_region(region)
            os.close(region.fd)
            raise
        # the service holds its own descriptor; the mapping keeps the file alive here
        os.close(region.fd)
        handle = UfoHandle(self, object_id, config, layout, region)
        self._handles[object_id] = handle
        return handle

    def free(self, handle: "UfoHandle") -> None:
        if handle.core is not self or handle.id not in self._handles:
            raise UfoFreed(f"object {handle.id} is already freed")
        try:
            self._call("free", handle.id)
        finally:
            del self._handles[handle.id]
            unmap_region(handle._region)
            handle._freed = True

    def evict(self, handle: Optional["UfoHandle"] = None) -> int:
        """Dematerialize every resident chunk (of ``handle``, or of all objects)."""
        return self._call("evict", None if handle is None else handle.id)

    def stats(self) -> dict:
        return self._call("stats")

    def object_stats(self, handle: "UfoHandle") -> dict:
        return self._call("object_stats", handle.id)

    def shutdown(self) -> None:
        """Free every object and stop the service.  Safe to call twice."""
        global _current
        if not self.live:
            return
        try:
            self._call("shutdown")
        except CoreError:
            pass
        for handle in list(self._handles.values()):
            unmap_region(handle._region)
            handle._freed = True
        self._handles.clear()
        self._mark_dead()
        self._proc.join(timeout=10)
        if self._proc.is_alive():  # pragma: no cover
            self._proc.kill()
            self._proc.join()
        with _current_lock:
            if _current is self:
                _current = None

    def service_pid(self) -> int:
        return self._proc.pid

    # --------------------------------------------------------- status board

    def _board_status(self, object_id: int) -> int:
        return self._board[object_id % _service.BOARD_SIZE]


class UfoHandle:
    """A created object.

    ``address`` is the user-visible start (header start); ``body_address`` is
    element 0.  Both stay fixed for the object's lifetime.  Inside a fault
    service (population functions of derived objects), reads route to the
    service directly.  A handle pickles to its id and geometry only.
    """

    def __init__(self, core: Core, object_id: int, config: UfoConfig, layout: UfoLayout,
                 region: Region) -> None:
        self.core = core
        self.id = object_id
        self.config = config
        self.layout = layout
        self._region = region
        self._freed = False

    def __getstate__(self):
        return {"id": self.id, "config": self.config, "layout": self.layout}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self.core = None
        self._region = None
        self._freed = False

    def __repr__(self) -> str:
        return (f"<UfoHandle id={self.id} n={self.layout.element_count} "
                f"e={self.layout.element_size} status={self.status}>")

    # ------------------------------------------------------------ geometry

    @property
    def element_size(self) -> int:
        return self.layout.element_size

    @property
    def element_count(self) -> int:
        return self.layout.element_count

    def __len__(self) -> int:
        return self.layout.element_count

    @property
    def dtype(self) -> np.dtype:
        if self.config.dtype is not None:
            return np.dtype(self.config.dtype)
        return np.dtype(f"V{self.layout.element_size}")

    @property
    def read_only(self) -> bool:
        return self.config.read_only

    @property
    def address(self) -> int:
        self._check_local()
        return self._region.base + self.layout.user_offset

    @property
    def body_address(self) -> int:
        self._check_local()
        return self._region.base + self.layout.body_start

    @property
    def status(self) -> str:
        if self._freed:
            return "freed"
        if self.core is None:
            return "remote"
        code = self.core._board_status(self.id)
        return {_service.POISONED: "poisoned", _service.FREED: "freed"}.get(code, "live")

    @property
    def error(self) -> Optional[str]:
        return self.core._call("status", self.id)[1]

    # -------------------------------------------------------------- checks

    def _check_local(self) -> None:
        if self._freed:
            raise UfoFreed(f"object {self.id} has been freed")
        if self.core is None:
            raise UfoFreed(f"object {self.id} is not owned by this process")

    def _check_live(self) -> None:
        self._check_local()
        if self.core._board_status(self.id) == _service.POISONED:
            raise UfoPoisoned(self.id, self.core._call("status", self.id)[1])

    def _check_index(self, i: int) -> int:
        n = self.layout.element_count
        i = int(i)
        if not 0 <= i < n:
            raise IndexError(f"element index {i} outside [0, {n})")
        return i

    def _check_range(self, lo: int, hi: int) -> tuple[int, int]:
        n = self.layout.element_count
        lo, hi = int(lo), int(hi)
        if not 0 <= lo <= hi <= n:
            raise IndexError(f"element range [{lo}, {hi}) outside [0, {n}]")
        return lo, hi

    # ------------------------------------------------------------- access

    def _raw(self, byte_lo: int, byte_hi: int) -> np.ndarray:
        """Copy of region bytes, materializing as needed."""
        if self.core is None:
            svc = _service.active_service()
            if svc is None:
                raise UfoFreed(f"object {self.id} is not owned by this process")
            return svc.read_bytes(self.id, byte_lo, byte_hi)
        self._check_live()
        if self.core._soft:
            out = self.core._call("read_bytes", self.id, byte_lo, byte_hi)
        else:
            out = self._region.view(byte_lo, byte_hi - byte_lo).copy()
        # population may have failed while this read was being served
        self._check_live()
        return out

    def read(self, i: int):
        """Element ``i`` as a numpy scalar (raw bytes for untyped objects)."""
        i = self._check_index(i)
        off = self.layout.body_start + i * self.layout.element_size
        raw = self._raw(off, off + self.layout.element_size)
        value = raw.view(self.dtype)[0]
        return value.tobytes() if self.config.dtype is None else value

    def read_range(self, lo: int = 0, hi: Optional[int] = None) -> np.ndarray:
        """Copy of elements ``[lo, hi)`` as a typed array."""
        hi = self.layout.element_count if hi is None else hi
        lo, hi = self._check_range(lo, hi)
        e, B = self.layout.element_size, self.layout.body_start
        return self._raw(B + lo * e, B + hi * e).view(self.dtype)

    def __getitem__(self, key):
        if isinstance(key, slice):
            lo, hi, step = key.indices(self.layout.element_count)
            if step == 1:
                return self.read_range(lo, max(lo, hi))
            return self.read_range(min(lo, hi), max(lo, hi) + 1)[::step] if lo != hi else \
                np.empty(0, dtype=self.dtype)
        i = int(key)
        if i < 0:
            i += self.layout.element_count
        return self.read(i)

    def write(self, i: int, value) -> None:
        i = self._check_index(i)
        data = np.array(value, dtype=self.dtype).tobytes() if not isinstance(value, bytes) else value
        if len(data) != self.layout.element_size:
            raise ValueError(f"element is {self.layout.element_size} bytes, got {len(data)}")
        self.write_bytes(self.layout.body_start + i * self.layout.element_size, data)

    def write_range(self, lo: int, values) -> None:
        values = np.ascontiguousarray(values, dtype=self.dtype)
        lo, _ = self._check_range(lo, lo + values.size)
        self.write_bytes(self.layout.body_start + lo * self.layout.element_size, values.tobytes())

    def __setitem__(self, key, value) -> None:
        if isinstance(key, slice):
            lo, hi, step = key.indices(self.layout.element_count)
            if step != 1:
                raise ValueError("strided assignment is not supported")
            values = np.broadcast_to(np.asarray(value, dtype=self.dtype), (max(hi - lo, 0),))
            self.write_range(lo, values)
            return
        i = int(key)
        if i < 0:
            i += self.layout.element_count
        self.write(i, value)

    def write_bytes(self, byte_lo: int, data: bytes) -> None:
        """Store raw bytes at a region offset (header or body)."""
        self._check_live()
        if not 0 <= byte_lo <= byte_lo + len(data) <= self.layout.total_reserved:
            raise IndexError(f"byte range [{byte_lo}, +{len(data)}) outside the object")
        if self.read_only:
            self.core.read_only_writes += 1
            warnings.warn(f"write to read-only object {self.id} will be discarded at eviction",
                          ReadOnlyWriteWarning, stacklevel=3)
        if self.core._soft:
            self.core._call("write_bytes", self.id, byte_lo, bytes(data))
        else:
            self._region.view(byte_lo, len(data))[:] = np.frombuffer(data, dtype=np.uint8)

    def header(self) -> np.ndarray:
        """Copy of the header bytes."""
        L = self.layout
        return self._raw(L.user_offset, L.body_start)

    def write_header(self, data: bytes) -> None:
        if len(data) > self.layout.header_size:
            raise ValueError(f"header is {self.layout.header_size} bytes, got {len(data)}")
        self.write_bytes(self.layout.user_offset, data)

    def asarray(self) -> np.ndarray:
        """Zero-copy typed view of the body.

        Touching it materializes chunks on demand; no copy is made.  Needs the
        userfault backend (the soft backend has no transparent access).
        """
        self._check_live()
        if self.core._soft:
            raise CoreError("direct memory views need the userfault backend; use read_range")
        L = self.layout
        view = self._region.view(L.body_start, L.body_bytes).view(self.dtype)
        if self.read_only:
            view.flags.writeable = False
        return view

    def ensure(self, lo: int = 0, hi: Optional[int] = None) -> None:
        """Materialize the chunks holding elements ``[lo, hi)`` without reading them."""
        hi = self.layout.element_count if hi is None else hi
        lo, hi = self._check_range(lo, hi)
        if lo == hi:
            return
        e, B = self.layout.element_size, self.layout.body_start
        self._check_live()
        self.core._call("ensure", self.id, B + lo * e, B + hi * e)

    def free(self) -> None:
        self._check_local()
        self.core.free(self)


# -------------------------------------------------------------- module level


def core_init(params: Optional[CoreParams] = None, **overrides) -> Core:
    """Start a core.  ``overrides`` are :class:`CoreParams` fields."""
    if params is None:
        params = CoreParams.from_env(**overrides)
    elif overrides:
        params = replace(params, **overrides)
    return Core(params)


def core_shutdown(core: Optional[Core] = None) -> None:
    core = core if core is not None else _current
    if core is not None:
        core.shutdown()


def current_core() -> Optional[Core]:
    return _current


def ufo_new(core: Core, config: UfoConfig) -> UfoHandle:
    return core.new(config)


def ufo_free(core: Core, handle: UfoHandle) -> None:
    core.free(handle)


def ufo_read(handle: UfoHandle, i: int):
    return handle.read(i)


def ufo_write(handle: UfoHandle, i: int, value) -> None:
    handle.write(i, value)
