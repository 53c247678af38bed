"""Fault service driven in-process with the soft backend (no fork)."""

import mmap

import numpy as np
import pytest

from ufo import backends as B
from ufo.errors import UfoFreed, UnresolvableFault
from ufo.fault import FaultEvent, SoftBackend, map_region, unmap_region
from ufo.layout import UfoConfig
from ufo.service import (BOARD_SIZE, FREED, LIVE, POISONED, FaultService, ObjectRegistry,
                         ServiceParams)
from ufo.store import WaterMarks

PAGE = 4096


@pytest.fixture
def svc():
    board = mmap.mmap(-1, BOARD_SIZE)
    s = FaultService(SoftBackend(), ServiceParams(WaterMarks(16 * PAGE, 8 * PAGE)), board)
    s.regions = []
    yield s
    for r in s.regions:
        unmap_region(r)
    s.backend.close()


_ids = iter(range(1, 10**6))


def add(svc, config):
    from ufo.layout import compute_layout
    L = compute_layout(config, PAGE)
    region = map_region(max(L.total_reserved, PAGE))
    svc.regions.append(region)
    oid = next(_ids)
    svc.create(oid, config, region)
    return oid, L


def body(svc, oid, L, lo=0, hi=None):
    hi = L.element_count if hi is None else hi
    e = L.element_size
    return svc.read_bytes(oid, L.body_start + lo * e, L.body_start + hi * e)


def test_straddling_elements_are_exact(svc):
    # 12-byte elements never align with 4 KiB chunks
    rec = np.dtype([("a", "<i4"), ("b", "<i8")], align=False)
    n = 5000
    src = np.zeros(n, rec)
    src["a"] = np.arange(n)
    src["b"] = -np.arange(n) * 7

    def pop(lo, hi, ud, target):
        target[:] = ud[lo:hi].view(np.uint8)

    oid, L = add(svc, UfoConfig(12, n, pop, src, chunk_size=PAGE))
    assert L.chunk_count > 10
    got = body(svc, oid, L).view(rec)
    assert np.array_equal(got, src)


def test_populate_calls_match_chunks_touched(svc):
    oid, L = add(svc, B.seq_config(0, 100_000, dtype=np.int32, chunk_size=PAGE))
    body(svc, oid, L, 0, 2000)  # bytes [0, 8000): chunks 0 and 1
    assert svc.registry.get(oid).populate_calls == 2
    body(svc, oid, L, 0, 2000)
    assert svc.registry.get(oid).populate_calls == 2


def test_header_chunks_zero_and_writable(svc):
    oid, L = add(svc, UfoConfig(8, 10, B.seq_populate, B.SeqSpec(1, 10, 1, np.int64),
                                header_size=24, chunk_size=PAGE, dtype=np.int64))
    assert L.body_start == PAGE
    assert not svc.read_bytes(oid, L.user_offset, L.body_start).any()
    svc.write_bytes(oid, L.user_offset, b"HDR")
    assert svc.read_bytes(oid, L.user_offset, L.user_offset + 3).tobytes() == b"HDR"
    assert body(svc, oid, L).view("<i8").tolist() == list(range(1, 11))
    assert svc.registry.get(oid).populate_calls == 1


def test_resident_bytes_bounded_and_collections_end_low(svc):
    oid, L = add(svc, B.seq_config(0, 200_000, dtype=np.int32, chunk_size=PAGE))
    for lo in range(0, 200_000, 1000):
        body(svc, oid, L, lo, min(lo + 1000, 200_001))
        assert svc.ledger.resident_bytes <= svc.marks.high + PAGE
    c = svc.counters
    assert c.collections > 0 and c.peak_resident <= svc.marks.high + PAGE
    assert all(end <= svc.marks.low for end in c.collection_ends)


def test_dirty_chunk_survives_eviction_and_digest_is_re_recorded(svc):
    oid, L = add(svc, B.seq_config(0, 10_000, dtype=np.int32, chunk_size=PAGE))
    svc.write_bytes(oid, 40, np.array([-5], "<i4").tobytes())
    svc.evict(oid)
    c = svc.counters
    assert c.cache_writes == 1
    assert body(svc, oid, L, 10, 11).view("<i4")[0] == -5
    assert c.cache_hits == 1
    # unchanged since the reload: its digest was taken from the cached bytes
    svc.evict(oid)
    assert c.cache_writes == 1


def test_read_only_discards_writes_and_never_hashes(svc):
    oid, L = add(svc, B.seq_config(0, 10_000, dtype=np.int32, chunk_size=PAGE, read_only=True))
    svc.write_bytes(oid, 40, np.array([-5], "<i4").tobytes())
    assert body(svc, oid, L, 10, 11).view("<i4")[0] == -5
    svc.evict(oid)
    assert body(svc, oid, L, 10, 11).view("<i4")[0] == 10
    assert svc.counters.hash_calls == 0 and svc.registry.get(oid).hash_calls == 0


@pytest.mark.parametrize("bad", ["status", "raise"])
def test_populate_failure_poisons(svc, bad):
    def pop(lo, hi, ud, t):
        if bad == "raise":
            raise KeyError("gone")
        return 3

    oid, L = add(svc, UfoConfig(4, 100, pop, None, chunk_size=PAGE))
    assert not body(svc, oid, L).any()  # zeros, the faulting reader is not left hanging
    status, err = svc.status(oid)
    assert status == "poisoned" and ("status 3" in err or "KeyError" in err)
    assert svc.board[oid] == POISONED


def test_nested_access_poisons_and_resident_reads_are_allowed(svc):
    src, Ls = add(svc, B.seq_config(0, 100_000, dtype=np.int32, chunk_size=PAGE))

    def pop(lo, hi, ud, t):
        t.view("<i4")[:] = svc.read_elements(ud, lo, hi)

    ok, Lo = add(svc, UfoConfig(4, 10, pop, src, chunk_size=PAGE, dtype=np.int32))
    bad, Lb = add(svc, UfoConfig(4, 10, pop, src, chunk_size=PAGE, dtype=np.int32))
    body(svc, src, Ls, 0, 10)
    assert body(svc, ok, Lo).view("<i4").tolist() == list(range(10))
    svc.evict(src)
    body(svc, bad, Lb)
    status, err = svc.status(bad)
    assert status == "poisoned" and "nested" in err


def test_pretouch_materializes_inputs_before_populate(svc):
    src, _ = add(svc, B.seq_config(0, 50_000, dtype=np.int32, chunk_size=PAGE))

    class Doubler:
        def pretouch(self, lo, hi, ud, reader):
            return reader(ud, lo, hi)

        def __call__(self, lo, hi, values, t):
            t.view("<i4")[:] = values * 2

    oid, L = add(svc, UfoConfig(4, 50_000, Doubler(), src, chunk_size=PAGE, dtype=np.int32))
    assert np.array_equal(body(svc, oid, L).view("<i4"), np.arange(50_000, dtype=np.int32) * 2)
    assert svc.status(oid)[0] == "live"


def test_free_drops_residency(svc):
    a, La = add(svc, B.seq_config(0, 5000, dtype=np.int32, chunk_size=PAGE))
    b, Lb = add(svc, B.seq_config(0, 5000, dtype=np.int32, chunk_size=PAGE))
    body(svc, a, La)
    body(svc, b, Lb, 0, 10)
    before = svc.ledger.resident_bytes
    dropped = svc.free(a)
    assert dropped == 5 * PAGE and svc.ledger.resident_bytes == before - dropped
    assert svc.board[a] == FREED and svc.board[b] == LIVE
    with pytest.raises(UfoFreed):
        svc.free(a)


def test_fault_events_resolve_through_the_registry(svc):
    oid, L = add(svc, B.seq_config(0, 5000, dtype=np.int32, chunk_size=PAGE))
    base = svc.registry.get(oid).region.base
    svc.handle_fault(FaultEvent(base + 3 * PAGE + 17, "read"))
    assert svc.object_stats(oid)["resident_chunks"] == [3]
    with pytest.raises(UnresolvableFault):
        svc.resolve(1)


def test_registry_rejects_overlap():
    class R:
        def __init__(self, base, length):
            self.base, self.length = base, length

        def contains(self, a):
            return self.base <= a < self.base + self.length

    class O:
        def __init__(self, i, base, length):
            self.id, self.region = i, R(base, length)

    reg = ObjectRegistry()
    reg.add(O(1, 1000, 100))
    reg.add(O(2, 1100, 50))
    with pytest.raises(ValueError):
        reg.add(O(3, 1050, 10))
    with pytest.raises(ValueError):
        reg.add(O(3, 900, 101))
    assert reg.lookup(1099).id == 1 and reg.lookup(1100).id == 2
    assert reg.lookup(1150) is None and reg.lookup(5) is None
