import os
import pickle
import signal
import subprocess
import sys
import textwrap
import warnings

import numpy as np
import pytest

import ufo
from ufo import CoreError, CoreParams, ReadOnlyWriteWarning, UfoConfig, UfoFreed, UfoPoisoned
from ufo.layout import LayoutError
from conftest import HAVE_USERFAULT, make_core


def populate_calls(core):
    return core.stats()["counters"].populate_calls


def test_init_twice_is_an_error(core):
    assert core.live
    with pytest.raises(CoreError):
        make_core()


def test_bad_water_marks():
    with pytest.raises(ValueError):
        CoreParams(high_water=10 << 20, low_water=10 << 20)
    with pytest.raises(ValueError):
        CoreParams(chunk_size=1000)


def test_params_from_env(monkeypatch):
    monkeypatch.setenv("UFO_HIGH_WATER", str(64 << 20))
    monkeypatch.setenv("UFO_LOW_WATER", "0x1000000")
    monkeypatch.setenv("UFO_BACKEND", "soft")
    p = CoreParams.from_env(chunk_size=1 << 16)
    assert (p.high_water, p.low_water, p.backend, p.chunk_size) == (64 << 20, 16 << 20, "soft", 1 << 16)
    monkeypatch.setenv("UFO_CHUNK_SIZE", "lots")
    with pytest.raises(ValueError):
        CoreParams.from_env()


def test_new_is_lazy(core):
    before = populate_calls(core)
    h = core.new(ufo.seq_config(1, 1 << 28))
    assert populate_calls(core) == before
    assert core.stats()["resident_bytes"] == 0
    assert h.read(4) == 5
    assert populate_calls(core) == before + 1


def test_empty_object(core):
    h = core.new(UfoConfig(4, 0, header_size=16))
    assert len(h) == 0
    assert h.body_address == h.address + 16
    assert h.read_range().size == 0
    with pytest.raises(IndexError):
        h.read(0)


def test_zero_element_size_rejected(core):
    with pytest.raises(LayoutError):
        core.new(UfoConfig(0, 10))


def test_read_write_and_bounds(core):
    h = core.new(ufo.seq_config(1, 100))
    h.write(7, 1234)
    assert ufo.ufo_read(h, 7) == 1234
    h[8] = -1
    assert h[8] == -1 and h[-1] == 100
    assert h[5:9].tolist() == [6, 7, 1234, -1]
    with pytest.raises(IndexError):
        h.read(100)
    with pytest.raises(IndexError):
        h.write(-1, 0)
    with pytest.raises(ValueError):
        h.write(0, b"\x00")


def test_untyped_objects_return_bytes(core):
    h = core.new(UfoConfig(3, 5, lambda lo, hi, ud, t: t.__setitem__(slice(None), 7)))
    assert h.read(2) == b"\x07\x07\x07"


def test_header_roundtrip(core):
    h = core.new(ufo.seq_config(1, 10, header_size=8))
    h.write_header(b"HEADER01")
    assert h.header().tobytes() == b"HEADER01"
    assert h.read_range().tolist() == list(range(1, 11))


def test_free_drops_resident_bytes_and_double_free(core):
    a = core.new(ufo.seq_config(1, 1 << 20))
    b = core.new(ufo.seq_config(1, 1 << 20))
    a.read_range(0, 1 << 19)
    b.read(0)
    before = core.stats()["resident_bytes"]
    per_a = core.object_stats(a)["resident_bytes"]
    assert per_a == 2 << 20
    ufo.ufo_free(core, a)
    assert core.stats()["resident_bytes"] == before - per_a
    assert a.status == "freed"
    with pytest.raises(UfoFreed):
        a.free()
    with pytest.raises(UfoFreed):
        a.read(0)


def test_shutdown_frees_and_is_idempotent(backend_name):
    c = make_core(backend_name)
    h = c.new(ufo.seq_config(1, 10))
    c.shutdown()
    c.shutdown()
    assert h.status == "freed"
    with pytest.raises(CoreError):
        c.stats()
    with pytest.raises(CoreError):
        c.new(ufo.seq_config(1, 10))
    # a fresh core may start afterwards
    make_core(backend_name).shutdown()


def test_context_manager(backend_name):
    with make_core(backend_name) as c:
        assert c.new(ufo.seq_config(1, 3)).read_range().tolist() == [1, 2, 3]
    assert not c.live


def test_read_only_writes_flagged_and_discarded(core):
    h = core.new(ufo.seq_config(1, 10, read_only=True))
    with pytest.warns(ReadOnlyWriteWarning):
        h.write(0, 99)
    assert h.read(0) == 99
    assert core.read_only_writes == 1
    core.evict(h)
    assert h.read(0) == 1
    assert core.object_stats(h)["hash_calls"] == 0


def test_poisoned_object_reports_error(core):
    def broken(lo, hi, ud, t):
        raise OSError("disk on fire")

    h = core.new(UfoConfig(4, 10, broken, dtype=np.int32))
    with pytest.raises(UfoPoisoned, match="disk on fire"):
        h.read(0)
    assert h.status == "poisoned"
    with pytest.raises(UfoPoisoned):
        h.read_range()
    h.free()


def test_file_and_csv_objects(core, int32_file, tmp_path):
    path, arr = int32_file(300_000, "random")
    h = core.new(ufo.file_config(path, np.int32))
    assert np.array_equal(h.read_range(), arr)
    p = tmp_path / "c.csv"
    p.write_text("a,b\n" + "".join(f"{i},{i / 4}\n" for i in range(3000)))
    idx = ufo.csv_scan(str(p))
    col = core.new(ufo.csv_config(idx, "b"))
    assert np.array_equal(col.read_range(), np.arange(3000) / 4)


def test_handle_pickles_without_core(core):
    h = core.new(ufo.seq_config(1, 10))
    clone = pickle.loads(pickle.dumps(h))
    assert clone.id == h.id and clone.core is None and clone.status == "remote"
    with pytest.raises(UfoFreed):
        clone.read(0)


@pytest.mark.skipif(not HAVE_USERFAULT, reason="userfaultfd unavailable")
class TestDirectMemory:
    @pytest.fixture
    def ucore(self):
        c = make_core("userfault", high=4 << 20, low=2 << 20)
        yield c
        c.shutdown()

    def test_transparency(self, ucore):
        h = ucore.new(ufo.seq_config(-50, 3_000_000, 7, dtype=np.int64))
        view = h.asarray()
        for i in np.random.default_rng(0).integers(0, len(h), 200):
            assert view[i] == h.read(i) == -50 + 7 * i

    def test_address_stable_across_evictions(self, ucore):
        h = ucore.new(ufo.seq_config(0, 4_000_000, dtype=np.int32))
        addr, body = h.address, h.body_address
        v = h.asarray()
        for _ in range(3):
            assert int(v.sum(dtype=np.int64)) == 4_000_000 * 4_000_001 // 2
            ucore.evict()
            assert (h.address, h.body_address) == (addr, body)
            assert v.ctypes.data == body
        assert ucore.stats()["counters"].evictions > 0

    def test_direct_writes_persist(self, ucore):
        h = ucore.new(ufo.seq_config(0, 4_000_000, dtype=np.int32))
        v = h.asarray()
        v[123_456] = -9
        ucore.evict()
        assert v[123_456] == -9 and h.read(123_456) == -9

    def test_read_only_view_is_not_writeable(self, ucore):
        h = ucore.new(ufo.seq_config(0, 100, read_only=True))
        assert not h.asarray().flags.writeable


def test_soft_backend_refuses_direct_views():
    with make_core("soft") as c:
        with pytest.raises(CoreError):
            c.new(ufo.seq_config(1, 10)).asarray()


def test_dead_service_is_reported(backend_name):
    c = make_core(backend_name)
    h = c.new(ufo.seq_config(1, 10))
    os.kill(c.service_pid(), signal.SIGKILL)
    c._proc.join(5)
    with pytest.raises(CoreError):
        c.stats()
    c.shutdown()


def _run_script(code, timeout=60):
    return subprocess.run([sys.executable, "-c", textwrap.dedent(code)], capture_output=True,
                          text=True, timeout=timeout)


def test_abort_on_populate_error_kills_application():
    proc = _run_script("""
        import ufo
        from ufo import UfoConfig
        core = ufo.core_init(abort_on_populate_error=True, backend="soft")
        def bad(lo, hi, ud, t):
            raise RuntimeError("fatal")
        h = core.new(UfoConfig(4, 10, bad))
        try:
            h.read(0)
        except Exception:
            pass
        import time; time.sleep(5)
        print("survived")
    """)
    assert proc.returncode == -signal.SIGABRT
    assert "survived" not in proc.stdout
    assert "fatal" in proc.stderr
