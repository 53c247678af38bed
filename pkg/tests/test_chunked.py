import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import ufo
from ufo import UfoConfig, UfoPoisoned
from ufo.chunked import ChunkPlan, map_into_ufo, reduce_chunks, sum_chunks
from conftest import make_core


@settings(max_examples=200)
@given(st.integers(0, 10_000), st.integers(1, 3000))
def test_plan_covers_exactly(n, k):
    ranges = list(ChunkPlan(n, k))
    assert len(ranges) == len(ChunkPlan(n, k))
    covered = [i for lo, hi in ranges for i in range(lo, hi)]
    assert covered == list(range(n))
    assert all(0 < hi - lo <= k for lo, hi in ranges)


def test_plan_rejects_bad_k():
    with pytest.raises(ValueError):
        ChunkPlan(10, 0)


def test_identity_map(core):
    s = core.new(ufo.seq_config(1, 10))
    m = map_into_ufo(core, s, lambda x: x)
    assert m.read_range().tolist() == list(range(1, 11))


def test_binary_map_matches_eager(core):
    s = core.new(ufo.seq_config(1, 10))
    f = core.new(ufo.fill_config(100, 10))
    m = map_into_ufo(core, [s, f], np.add)
    assert m.read_range().tolist() == list(range(101, 111))


def test_map_is_lazy_until_read(core):
    s = core.new(ufo.seq_config(1, 1 << 20))
    before = core.stats()["counters"].populate_calls
    m = map_into_ufo(core, s, lambda x: x * 3)
    assert core.stats()["counters"].populate_calls == before
    assert m.read(10) == 33
    assert core.stats()["counters"].populate_calls > before


def test_map_dtype_inference_and_override(core):
    s = core.new(ufo.seq_config(1, 10))
    assert map_into_ufo(core, s, lambda x: x / 2).dtype == np.float64
    assert map_into_ufo(core, s, lambda x: x, dtype=np.int64).read_range().dtype == np.int64


def test_map_empty_inputs(core):
    e = core.new(ufo.seq_config(1, 0))
    assert len(map_into_ufo(core, e, lambda x: x)) == 0


def test_map_length_mismatch(core):
    with pytest.raises(ValueError):
        map_into_ufo(core, [core.new(ufo.seq_config(1, 10)), core.new(ufo.seq_config(1, 11))], np.add)


def test_map_over_poisoned_input(core):
    def bad(lo, hi, ud, t):
        return 1

    p = core.new(UfoConfig(4, 10, bad, dtype=np.int32))
    with pytest.raises(UfoPoisoned):
        p.read(0)
    with pytest.raises(UfoPoisoned):
        map_into_ufo(core, p, lambda x: x)


def test_input_poisoned_after_map_poisons_result(core):
    def flaky(lo, hi, ud, t):
        return 2

    p = core.new(UfoConfig(4, 10, flaky, dtype=np.int32))
    m = map_into_ufo(core, p, lambda x: x + 1)
    with pytest.raises(UfoPoisoned, match="reading inputs failed"):
        m.read_range()


def test_chained_maps_larger_than_high_water(backend_name):
    with make_core(backend_name, high=4 << 20, low=2 << 20) as c:
        n = 3_000_000
        s = c.new(ufo.seq_config(1, n, dtype=np.int64))
        m = map_into_ufo(c, s, lambda x: x * 2)
        m2 = map_into_ufo(c, [m, s], lambda a, b: a - b)
        assert reduce_chunks(m2, np.add, 0) == n * (n + 1) // 2
        assert c.stats()["counters"].peak_resident <= (4 << 20) + (1 << 20)


def test_reduce_examples(core, int32_file):
    s = core.new(ufo.seq_config(1, 10))
    assert sum_chunks(s) == 55
    assert reduce_chunks(s, lambda a, b: a * b, 1) == 3628800
    assert reduce_chunks(s, np.maximum, -1) == 10
    assert reduce_chunks(core.new(ufo.seq_config(1, 0)), np.add, 42) == 42
    path, arr = int32_file(500_000, "random")
    f = core.new(ufo.file_config(path, np.int32))
    assert reduce_chunks(f, np.add, 0) == int(arr.astype(np.int64).sum())


def test_reduce_order_is_ascending(core):
    s = core.new(ufo.seq_config(1, 5000))
    seen = reduce_chunks(s, lambda acc, x: acc + [x], [], k=333)
    assert seen == list(range(1, 5001))


def test_reduce_memory_bound(backend_name):
    with make_core(backend_name, high=4 << 20, low=2 << 20) as c:
        s = c.new(ufo.seq_config(1, 8_000_000))
        assert sum_chunks(s) == 8_000_000 * 8_000_001 // 2
        st_ = c.stats()["counters"]
        assert st_.peak_resident <= (4 << 20) + (1 << 20)
        assert st_.collections > 0
