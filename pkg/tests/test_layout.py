import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ufo.layout import (LayoutError, UfoConfig, chunk_of_offset, compute_layout, index_to_offset,
                        offset_to_index, round_up)

PAGE = 4096


def cfg(e=4, n=10, H=0, C=1 << 20):
    return UfoConfig(element_size=e, element_count=n, header_size=H, chunk_size=C)


def test_headerless_body_starts_at_base():
    L = compute_layout(cfg(4, 1000), PAGE)
    assert L.body_start == 0 and L.user_offset == 0
    assert L.total_reserved == 4096


def test_header_pushes_body_to_chunk_boundary():
    L = compute_layout(cfg(8, 100, H=40, C=PAGE * 4), PAGE)
    assert L.body_start == PAGE * 4
    assert L.user_offset == PAGE * 4 - 40
    assert L.header_chunks == 1
    assert L.extent(0).header


def test_empty_object_body_address_is_header_end():
    L = compute_layout(cfg(4, 0, H=16, C=PAGE), PAGE)
    assert L.body_start == L.user_offset + 16
    assert L.body_bytes == 0


def test_zero_element_size_rejected():
    with pytest.raises(LayoutError):
        compute_layout(cfg(0, 10), PAGE)


@pytest.mark.parametrize("C", [0, 1000, PAGE + 1])
def test_chunk_size_must_be_page_multiple(C):
    with pytest.raises(LayoutError):
        compute_layout(cfg(C=C), PAGE)


def test_dtype_must_match_element_size():
    with pytest.raises(LayoutError):
        UfoConfig(4, 10, dtype=np.int64).validate(PAGE)


def test_index_offset_bounds():
    L = compute_layout(cfg(4, 10), PAGE)
    assert index_to_offset(L, 9) == 36
    assert offset_to_index(L, 39) == 9
    with pytest.raises(LayoutError):
        index_to_offset(L, 10)
    with pytest.raises(LayoutError):
        offset_to_index(L, 40)
    with pytest.raises(LayoutError):
        chunk_of_offset(L, L.total_reserved)


geometry = st.tuples(
    st.integers(1, 64),                       # e
    st.integers(0, 5000),                     # n
    st.integers(0, 3 * PAGE),                 # H
    st.integers(1, 4).map(lambda k: k * PAGE),  # C
)


@settings(max_examples=300, deadline=None)
@given(geometry)
def test_chunks_tile_the_reservation(g):
    e, n, H, C = g
    L = compute_layout(cfg(e, n, H, C), PAGE)
    assert L.body_start % C == 0 and L.body_start >= H
    assert L.total_reserved % PAGE == 0 and L.total_reserved >= L.body_end
    exts = list(L.extents())
    assert exts[0].byte_lo == 0 if exts else L.total_reserved == 0
    for a, b in zip(exts, exts[1:]):
        assert a.byte_hi == b.byte_lo
    if exts:
        assert exts[-1].byte_hi == L.total_reserved
    for x in exts:
        assert x.byte_lo % PAGE == 0 and x.byte_hi % PAGE == 0 and 0 < x.length <= C


@settings(max_examples=300, deadline=None)
@given(geometry)
def test_extent_element_ranges_match_brute_force(g):
    e, n, H, C = g
    L = compute_layout(cfg(e, n, H, C), PAGE)
    B = L.body_start
    for x in L.extents():
        # brute force: every element with at least one byte in the window
        touching = [i for i in range(n) if B + i * e < x.byte_hi and B + (i + 1) * e > x.byte_lo]
        if x.header:
            assert x.byte_hi <= B and x.elem_lo == x.elem_hi == 0
        elif touching:
            assert (x.elem_lo, x.elem_hi) == (touching[0], touching[-1] + 1)
        else:
            assert x.elem_hi <= x.elem_lo


@settings(max_examples=300, deadline=None)
@given(geometry, st.data())
def test_chunk_of_offset_contains_offset(g, data):
    e, n, H, C = g
    L = compute_layout(cfg(e, n, H, C), PAGE)
    if L.total_reserved == 0:
        return
    off = data.draw(st.integers(0, L.total_reserved - 1))
    x = chunk_of_offset(L, off)
    assert x.byte_lo <= off < x.byte_hi
    if n and _in_body(L, off):
        i = offset_to_index(L, off)
        assert x.elem_lo <= i < x.elem_hi
        assert index_to_offset(L, i) <= off < index_to_offset(L, i) + e


def _in_body(L, off):
    return L.body_start <= off < L.body_end


@given(st.integers(0, 10**9), st.integers(1, 10**6))
def test_round_up(x, m):
    r = round_up(x, m)
    assert r % m == 0 and x <= r < x + m
