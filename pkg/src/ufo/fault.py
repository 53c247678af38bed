"""OS-facing fault layer: address reservation, fault delivery, page install and reclaim.

Object memory is a shared ``memfd`` mapping.  The mapping lives in the
application process; the fault service holds the same file descriptor, which
lets it read windows for hashing (``pread``) and drop pages (hole punching)
from outside the application's address space.

Two backends share one interface:

``UserfaultBackend``
    Linux ``userfaultfd`` in missing-page mode.  First touches block in the
    kernel until the service answers with ``UFFDIO_COPY``.

``SoftBackend``
    Portable fallback with no kernel trapping.  Faults are raised by the
    accessor helpers (``ufo_read``/``ufo_write``/range reads), which ask the
    service to materialize before touching memory.  Raw pointer access to a
    soft-backed object is not transparent.
"""

from __future__ import annotations

import ctypes
import errno
import logging
import mmap
import os
import select
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .layout import page_size

log = logging.getLogger("ufo.fault")

_libc = ctypes.CDLL(None, use_errno=True)
_libc.mmap.restype = ctypes.c_void_p
_libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int,
                       ctypes.c_int, ctypes.c_long]
_libc.munmap.restype = ctypes.c_int
_libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
_libc.ioctl.restype = ctypes.c_int
_libc.ioctl.argtypes = [ctypes.c_int, ctypes.c_ulong, ctypes.c_void_p]
_libc.fallocate.restype = ctypes.c_int
_libc.fallocate.argtypes = [ctypes.c_int, ctypes.c_int, ctypes.c_long, ctypes.c_long]
_libc.syscall.restype = ctypes.c_long

MAP_FAILED = ctypes.c_void_p(-1).value

_SYS_USERFAULTFD = {"x86_64": 323, "aarch64": 282}.get(os.uname().machine)
UFFD_USER_MODE_ONLY = 1
UFFD_API = 0xAA
UFFDIO_REGISTER_MODE_MISSING = 1
UFFD_EVENT_PAGEFAULT = 0x12
UFFD_PAGEFAULT_FLAG_WRITE = 1
FALLOC_FL_KEEP_SIZE = 1
FALLOC_FL_PUNCH_HOLE = 2


def _ioc(direction: int, nr: int, size: int) -> int:
    return (direction << 30) | (size << 16) | (UFFD_API << 8) | nr


class _UffdioApi(ctypes.Structure):
    _fields_ = [("api", ctypes.c_uint64), ("features", ctypes.c_uint64),
                ("ioctls", ctypes.c_uint64)]


class _UffdioRange(ctypes.Structure):
    _fields_ = [("start", ctypes.c_uint64), ("len", ctypes.c_uint64)]


class _UffdioRegister(ctypes.Structure):
    _fields_ = [("range", _UffdioRange), ("mode", ctypes.c_uint64),
                ("ioctls", ctypes.c_uint64)]


class _UffdioCopy(ctypes.Structure):
    _fields_ = [("dst", ctypes.c_uint64), ("src", ctypes.c_uint64), ("len", ctypes.c_uint64),
                ("mode", ctypes.c_uint64), ("copy", ctypes.c_int64)]


UFFDIO_API = _ioc(3, 0x3F, ctypes.sizeof(_UffdioApi))
UFFDIO_REGISTER = _ioc(3, 0x00, ctypes.sizeof(_UffdioRegister))
UFFDIO_UNREGISTER = _ioc(2, 0x01, ctypes.sizeof(_UffdioRange))
UFFDIO_WAKE = _ioc(2, 0x02, ctypes.sizeof(_UffdioRange))
UFFDIO_COPY = _ioc(3, 0x03, ctypes.sizeof(_UffdioCopy))

_MSG_SIZE = 32


class FaultError(OSError):
    """The OS refused a reservation, registration, install or reclaim."""


class BackendUnavailable(FaultError):
    pass


class FaultEvent(NamedTuple):
    address: int
    kind: str = "unknown"  # "read" | "write" | "unknown"


SHUTDOWN = "shutdown"
TIMEOUT = "timeout"


@dataclass
class Region:
    base: int
    length: int
    fd: int
    registered: bool = False
    released: bool = False
    resident: np.ndarray = field(default=None, repr=False)  # per-page installed flags

    def contains(self, address: int) -> bool:
        return self.base <= address < self.base + self.length

    def view(self, offset: int = 0, length: int | None = None) -> np.ndarray:
        """Raw ``uint8`` view of the mapping (application process only)."""
        if length is None:
            length = self.length - offset
        buf = (ctypes.c_uint8 * length).from_address(self.base + offset)
        return np.frombuffer(buf, dtype=np.uint8)


def _check(ret: int, what: str) -> int:
    if ret < 0:
        err = ctypes.get_errno()
        raise FaultError(err, f"{what}: {os.strerror(err)}")
    return ret


def map_region(length: int) -> Region:
    """Reserve ``length`` bytes of lazily committed shared memory in this process."""
    page = page_size()
    if length <= 0 or length % page:
        raise FaultError(errno.EINVAL, f"reservation length must be a positive page multiple, got {length}")
    fd = os.memfd_create("ufo", os.MFD_CLOEXEC)
    try:
        os.ftruncate(fd, length)
        addr = _libc.mmap(None, length, mmap.PROT_READ | mmap.PROT_WRITE,
                          mmap.MAP_SHARED | getattr(mmap, "MAP_NORESERVE", 0x4000), fd, 0)
        if addr in (None, MAP_FAILED):
            err = ctypes.get_errno()
            raise FaultError(err, f"mmap of {length} bytes failed: {os.strerror(err)}")
    except BaseException:
        os.close(fd)
        raise
    return Region(base=addr, length=length, fd=fd)


def unmap_region(region: Region) -> None:
    if region.released:
        raise FaultError(errno.EINVAL, f"region at {region.base:#x} already released")
    _check(_libc.munmap(region.base, region.length), "munmap")
    region.released = True


class _BackendBase:
    name = "base"

    def __init__(self) -> None:
        self._wake_r, self._wake_w = os.pipe2(os.O_CLOEXEC | os.O_NONBLOCK)
        self._shutdown = False
        self.page = page_size()

    # application + service: convenience for single-process use
    def reserve(self, length: int) -> Region:
        region = map_region(length)
        try:
            self.register(region)
        except BaseException:
            unmap_region(region)
            os.close(region.fd)
            raise
        return region

    def release(self, region: Region) -> None:
        if region.released:
            raise FaultError(errno.EINVAL, f"region at {region.base:#x} already released")
        if region.registered:
            self.unregister(region)
        unmap_region(region)
        os.close(region.fd)

    def register(self, region: Region) -> None:
        region.resident = np.zeros(region.length // self.page, dtype=bool)
        region.registered = True

    def unregister(self, region: Region) -> None:
        region.registered = False

    def request_shutdown(self) -> None:
        self._shutdown = True
        try:
            os.write(self._wake_w, b"x")
        except BlockingIOError:
            pass

    def fileno(self) -> int | None:
        return None

    def next_event(self, timeout: float | None = None):
        raise NotImplementedError

    def install(self, region: Region, byte_lo: int, data: np.ndarray) -> None:
        raise NotImplementedError

    def reclaim(self, region: Region, byte_lo: int, length: int) -> None:
        self._check_range(region, byte_lo, length)
        if length == 0:
            return
        _check(_libc.fallocate(region.fd, FALLOC_FL_PUNCH_HOLE | FALLOC_FL_KEEP_SIZE,
                               byte_lo, length), "fallocate(PUNCH_HOLE)")
        region.resident[byte_lo // self.page:(byte_lo + length) // self.page] = False

    def read(self, region: Region, byte_lo: int, length: int, out: np.ndarray | None = None) -> np.ndarray:
        """Read bytes through the shared file; holes read as zeros without allocating."""
        if out is None:
            out = np.empty(length, dtype=np.uint8)
        got = 0
        while got < length:
            n = os.preadv(region.fd, [memoryview(out[got:length])], byte_lo + got)
            if n <= 0:
                out[got:length] = 0
                break
            got += n
        return out

    def write(self, region: Region, byte_lo: int, data: np.ndarray) -> None:
        """Write bytes through the shared file (resident pages only)."""
        view = memoryview(np.ascontiguousarray(data, dtype=np.uint8))
        done = 0
        while done < len(view):
            done += os.pwritev(region.fd, [view[done:]], byte_lo + done)

    def resident_bytes(self, region: Region) -> int:
        return int(region.resident.sum()) * self.page if region.resident is not None else 0

    def close(self) -> None:
        for fd in (self._wake_r, self._wake_w):
            try:
                os.close(fd)
            except OSError:
                pass

    def close_application_side(self) -> None:
        """Drop descriptors the application process does not need after fork."""

    def _check_range(self, region: Region, byte_lo: int, length: int) -> None:
        if byte_lo % self.page or length % self.page:
            raise FaultError(errno.EINVAL, f"range [{byte_lo}, +{length}) is not page aligned")
        if byte_lo < 0 or byte_lo + length > region.length:
            raise FaultError(errno.EINVAL, f"range [{byte_lo}, +{length}) outside region of {region.length}")


class UserfaultBackend(_BackendBase):
    name = "userfault"

    def __init__(self) -> None:
        if _SYS_USERFAULTFD is None:
            raise BackendUnavailable(errno.ENOSYS, "userfaultfd syscall number unknown for this machine")
        fd = -1
        for flags in (0, UFFD_USER_MODE_ONLY):
            fd = _libc.syscall(_SYS_USERFAULTFD, os.O_CLOEXEC | os.O_NONBLOCK | flags)
            if fd >= 0:
                break
        if fd < 0:
            err = ctypes.get_errno()
            raise BackendUnavailable(err, f"userfaultfd unavailable: {os.strerror(err)}")
        api = _UffdioApi(api=UFFD_API, features=0, ioctls=0)
        if _libc.ioctl(fd, UFFDIO_API, ctypes.byref(api)) < 0:
            err = ctypes.get_errno()
            os.close(fd)
            raise BackendUnavailable(err, f"UFFDIO_API failed: {os.strerror(err)}")
        super().__init__()
        self.uffd = fd
        self._pending: deque[FaultEvent] = deque()

    def fileno(self) -> int:
        return self.uffd

    def register(self, region: Region) -> None:
        reg = _UffdioRegister(range=_UffdioRange(region.base, region.length),
                              mode=UFFDIO_REGISTER_MODE_MISSING)
        _check(_libc.ioctl(self.uffd, UFFDIO_REGISTER, ctypes.byref(reg)), "UFFDIO_REGISTER")
        super().register(region)

    def unregister(self, region: Region) -> None:
        rng = _UffdioRange(region.base, region.length)
        if _libc.ioctl(self.uffd, UFFDIO_UNREGISTER, ctypes.byref(rng)) < 0:
            # the application may already have unmapped the range
            log.debug("UFFDIO_UNREGISTER at %#x: %s", region.base, os.strerror(ctypes.get_errno()))
        super().unregister(region)

    def next_event(self, timeout: float | None = None):
        if self._pending:
            return self._pending.popleft()
        if self._shutdown:
            return SHUTDOWN
        ready, _, _ = select.select([self.uffd, self._wake_r], [], [], timeout)
        if self._wake_r in ready or self._shutdown:
            return SHUTDOWN
        if not ready:
            return TIMEOUT
        try:
            raw = os.read(self.uffd, _MSG_SIZE * 64)
        except BlockingIOError:
            return TIMEOUT
        except OSError as exc:
            raise FaultError(exc.errno, f"userfaultfd read failed: {exc}") from exc
        if not raw:
            raise FaultError(errno.EPIPE, "userfaultfd closed")
        for off in range(0, len(raw), _MSG_SIZE):
            event = raw[off]
            if event != UFFD_EVENT_PAGEFAULT:
                log.debug("ignoring userfault event %#x", event)
                continue
            flags = int.from_bytes(raw[off + 8:off + 16], "little")
            address = int.from_bytes(raw[off + 16:off + 24], "little")
            kind = "write" if flags & UFFD_PAGEFAULT_FLAG_WRITE else "read"
            self._pending.append(FaultEvent(address, kind))
        return self._pending.popleft() if self._pending else TIMEOUT

    def install(self, region: Region, byte_lo: int, data: np.ndarray) -> None:
        data = np.ascontiguousarray(data, dtype=np.uint8)
        self._check_range(region, byte_lo, data.size)
        page = self.page
        done = 0
        src = data.ctypes.data
        while done < data.size:
            cp = _UffdioCopy(dst=region.base + byte_lo + done, src=src + done,
                             len=data.size - done, mode=0, copy=0)
            ret = _libc.ioctl(self.uffd, UFFDIO_COPY, ctypes.byref(cp))
            if ret == 0:
                done = data.size
                break
            err = ctypes.get_errno()
            if cp.copy > 0:
                done += cp.copy
            elif err == errno.EEXIST:
                # page already present: idempotent success, skip it
                done += page
            elif err == errno.EAGAIN:
                continue
            else:
                raise FaultError(err, f"UFFDIO_COPY at offset {byte_lo + done}: {os.strerror(err)}")
        # wake anything that faulted on a page we skipped
        wake = _UffdioRange(region.base + byte_lo, data.size)
        _libc.ioctl(self.uffd, UFFDIO_WAKE, ctypes.byref(wake))
        region.resident[byte_lo // page:(byte_lo + data.size) // page] = True

    def wake(self, region: Region, byte_lo: int, length: int) -> None:
        rng = _UffdioRange(region.base + byte_lo, length)
        _libc.ioctl(self.uffd, UFFDIO_WAKE, ctypes.byref(rng))

    def close(self) -> None:
        try:
            os.close(self.uffd)
        except OSError:
            pass
        super().close()

    def close_application_side(self) -> None:
        # once the service owns the only uffd reference, its death unregisters
        # every range and blocked threads resume instead of hanging
        os.close(self.uffd)
        self.uffd = -1


class SoftBackend(_BackendBase):
    name = "soft"

    def __init__(self) -> None:
        super().__init__()
        self._pending: deque[FaultEvent] = deque()

    def post_fault(self, address: int, kind: str = "unknown") -> None:
        """Record an accessor-level fault (the soft analog of a trapped access)."""
        self._pending.append(FaultEvent(address, kind))

    def next_event(self, timeout: float | None = None):
        if self._pending:
            return self._pending.popleft()
        if self._shutdown:
            return SHUTDOWN
        ready, _, _ = select.select([self._wake_r], [], [], timeout)
        return SHUTDOWN if ready or self._shutdown else TIMEOUT

    def install(self, region: Region, byte_lo: int, data: np.ndarray) -> None:
        data = np.ascontiguousarray(data, dtype=np.uint8)
        self._check_range(region, byte_lo, data.size)
        page = self.page
        first, last = byte_lo // page, (byte_lo + data.size) // page
        if region.resident[first:last].all():
            return
        view = memoryview(data)
        done = 0
        while done < data.size:
            done += os.pwritev(region.fd, [view[done:]], byte_lo + done)
        region.resident[first:last] = True


BACKENDS = {"userfault": UserfaultBackend, "soft": SoftBackend, "trap": SoftBackend}


def make_backend(choice: str = "auto") -> _BackendBase:
    """Instantiate a backend; ``auto`` prefers userfaultfd and falls back to soft."""
    choice = (choice or "auto").lower()
    if choice == "auto":
        try:
            return UserfaultBackend()
        except BackendUnavailable as exc:
            log.warning("userfaultfd unavailable (%s); falling back to the soft backend", exc)
            return SoftBackend()
    try:
        cls = BACKENDS[choice]
    except KeyError:
        raise ValueError(f"unknown fault backend {choice!r}; expected one of auto, {', '.join(BACKENDS)}") from None
    return cls()
