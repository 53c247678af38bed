"""BLAKE3 (default hash mode) over contiguous byte windows.

Two implementations of the same function:

* ``digest_numba`` - scalar compression loop compiled with numba.
* ``digest_numpy`` - compresses all full 1 KiB leaves at once with uint32
  array arithmetic, then merges the tree level by level.

Only the unkeyed hash mode is needed for dirty detection, but the root node
supports extended output so the full published test vectors can be checked.
"""

from __future__ import annotations

import numpy as np

from . import USE_NUMBA, njit

OUT_LEN = 32
BLOCK_LEN = 64
CHUNK_LEN = 1024

CHUNK_START = 1
CHUNK_END = 2
PARENT = 4
ROOT = 8

IV = np.array(
    [0x6A09E667, 0xBB67AE85, 0x3C6EF372, 0xA54FF53A,
     0x510E527F, 0x9B05688C, 0x1F83D9AB, 0x5BE0CD19],
    dtype=np.uint32,
)

_PERMUTATION = [2, 6, 3, 10, 7, 0, 4, 13, 1, 11, 12, 5, 9, 14, 15, 8]


def _schedule() -> np.ndarray:
    # message word order for each of the 7 rounds
    rows = [list(range(16))]
    for _ in range(6):
        rows.append([rows[-1][p] for p in _PERMUTATION])
    return np.array(rows, dtype=np.int64)


SCHEDULE = _schedule()

# (a, b, c, d) state indices for the 4 column then 4 diagonal G calls
_G_INDEX = np.array(
    [[0, 4, 8, 12], [1, 5, 9, 13], [2, 6, 10, 14], [3, 7, 11, 15],
     [0, 5, 10, 15], [1, 6, 11, 12], [2, 7, 8, 13], [3, 4, 9, 14]],
    dtype=np.int64,
)

_IV64 = IV.astype(np.uint64)


# --------------------------------------------------------------------- numba


_M = np.uint64(0xFFFFFFFF)
_R16, _R12, _R8, _R7 = np.uint64(16), np.uint64(12), np.uint64(8), np.uint64(7)
_L16, _L20, _L24, _L25 = np.uint64(16), np.uint64(20), np.uint64(24), np.uint64(25)
_S32 = np.uint64(32)


@njit(inline="always")
def _g_nb(a, b, c, d, mx, my):
    # operands are uint64 holding 32-bit values; every constant must be uint64
    # too, since mixing with int64 promotes to float64
    a = (a + b + mx) & _M
    x = d ^ a
    d = ((x >> _R16) | (x << _L16)) & _M
    c = (c + d) & _M
    x = b ^ c
    b = ((x >> _R12) | (x << _L20)) & _M
    a = (a + b + my) & _M
    x = d ^ a
    d = ((x >> _R8) | (x << _L24)) & _M
    c = (c + d) & _M
    x = b ^ c
    b = ((x >> _R7) | (x << _L25)) & _M
    return a, b, c, d


@njit
def _compress_nb(cv, m, counter, block_len, flags, sched, out):
    s0, s1, s2, s3 = cv[0], cv[1], cv[2], cv[3]
    s4, s5, s6, s7 = cv[4], cv[5], cv[6], cv[7]
    s8, s9, s10, s11 = _IV64[0], _IV64[1], _IV64[2], _IV64[3]
    s12 = np.uint64(counter) & _M
    s13 = (np.uint64(counter) >> _S32) & _M
    s14 = np.uint64(block_len)
    s15 = np.uint64(flags)
    for r in range(7):
        o = sched[r]
        s0, s4, s8, s12 = _g_nb(s0, s4, s8, s12, m[o[0]], m[o[1]])
        s1, s5, s9, s13 = _g_nb(s1, s5, s9, s13, m[o[2]], m[o[3]])
        s2, s6, s10, s14 = _g_nb(s2, s6, s10, s14, m[o[4]], m[o[5]])
        s3, s7, s11, s15 = _g_nb(s3, s7, s11, s15, m[o[6]], m[o[7]])
        s0, s5, s10, s15 = _g_nb(s0, s5, s10, s15, m[o[8]], m[o[9]])
        s1, s6, s11, s12 = _g_nb(s1, s6, s11, s12, m[o[10]], m[o[11]])
        s2, s7, s8, s13 = _g_nb(s2, s7, s8, s13, m[o[12]], m[o[13]])
        s3, s4, s9, s14 = _g_nb(s3, s4, s9, s14, m[o[14]], m[o[15]])
    out[0] = s0 ^ s8
    out[1] = s1 ^ s9
    out[2] = s2 ^ s10
    out[3] = s3 ^ s11
    out[4] = s4 ^ s12
    out[5] = s5 ^ s13
    out[6] = s6 ^ s14
    out[7] = s7 ^ s15
    out[8] = s8 ^ cv[0]
    out[9] = s9 ^ cv[1]
    out[10] = s10 ^ cv[2]
    out[11] = s11 ^ cv[3]
    out[12] = s12 ^ cv[4]
    out[13] = s13 ^ cv[5]
    out[14] = s14 ^ cv[6]
    out[15] = s15 ^ cv[7]


@njit
def _load_block_nb(data, lo, hi, m):
    # little-endian words, zero padded
    if hi - lo == BLOCK_LEN:
        for w in range(16):
            p = lo + 4 * w
            m[w] = (np.uint64(data[p]) | (np.uint64(data[p + 1]) << 8)
                    | (np.uint64(data[p + 2]) << 16) | (np.uint64(data[p + 3]) << 24))
        return
    for w in range(16):
        m[w] = 0
    for k in range(hi - lo):
        m[k >> 2] |= np.uint64(data[lo + k]) << np.uint64(8 * (k & 3))


@njit
def _digest_nb(data, out_len, sched, iv):
    n = data.shape[0]
    nchunks = max(1, (n + CHUNK_LEN - 1) // CHUNK_LEN)
    stack = np.empty((64, 8), dtype=np.uint64)
    depth = 0
    m = np.empty(16, dtype=np.uint64)
    pm = np.empty(16, dtype=np.uint64)
    full = np.empty(16, dtype=np.uint64)
    cv = np.empty(8, dtype=np.uint64)
    last_cv = np.empty(8, dtype=np.uint64)
    last_flags = 0
    last_len = 0
    for c in range(nchunks):
        lo = c * CHUNK_LEN
        hi = min(lo + CHUNK_LEN, n)
        nblocks = max(1, (hi - lo + BLOCK_LEN - 1) // BLOCK_LEN)
        for i in range(8):
            cv[i] = iv[i]
        for b in range(nblocks):
            blo = lo + b * BLOCK_LEN
            bhi = min(blo + BLOCK_LEN, hi)
            _load_block_nb(data, blo, bhi, m)
            flags = CHUNK_START if b == 0 else 0
            if b == nblocks - 1:
                flags |= CHUNK_END
                if c == nchunks - 1:
                    # keep the final block as the (unfinished) output node
                    last_flags = flags
                    last_len = bhi - blo
                    for i in range(8):
                        last_cv[i] = cv[i]
                    break
            _compress_nb(cv, m, c, bhi - blo, flags, sched, full)
            for i in range(8):
                cv[i] = full[i]
        if c == nchunks - 1:
            break
        total = c + 1
        while total & 1 == 0:
            depth -= 1
            for i in range(8):
                pm[i] = stack[depth, i]
                pm[i + 8] = cv[i]
            _compress_nb(iv, pm, 0, BLOCK_LEN, PARENT, sched, full)
            for i in range(8):
                cv[i] = full[i]
            total >>= 1
        for i in range(8):
            stack[depth, i] = cv[i]
        depth += 1

    # fold the output node up through the remaining stack
    node_cv = last_cv.copy()
    node_m = m.copy()
    node_counter = nchunks - 1
    node_len = last_len
    node_flags = last_flags
    while depth > 0:
        depth -= 1
        _compress_nb(node_cv, node_m, node_counter, node_len, node_flags, sched, full)
        for i in range(8):
            node_m[i] = stack[depth, i]
            node_m[i + 8] = full[i]
            node_cv[i] = iv[i]
        node_counter = 0
        node_len = BLOCK_LEN
        node_flags = PARENT

    result = np.empty(out_len, dtype=np.uint8)
    t = 0
    pos = 0
    while pos < out_len:
        _compress_nb(node_cv, node_m, t, node_len, node_flags | ROOT, sched, full)
        for w in range(16):
            for k in range(4):
                if pos < out_len:
                    result[pos] = (full[w] >> np.uint64(8 * k)) & 0xFF
                    pos += 1
        t += 1
    return result


def digest_numba(data, out_len: int = OUT_LEN) -> bytes:
    buf = _as_u8(data)
    return _digest_nb(buf, out_len, SCHEDULE, _IV64).tobytes()


# --------------------------------------------------------------------- numpy


def _rotr(x: np.ndarray, n: int) -> np.ndarray:
    return (x >> np.uint32(n)) | (x << np.uint32(32 - n))


def _compress_np(cv, m, counter, block_len, flags) -> np.ndarray:
    """Vectorized compression: ``cv`` is (8, N), ``m`` is (16, N)."""
    N = cv.shape[1]
    s = np.empty((16, N), dtype=np.uint32)
    s[:8] = cv
    s[8:12] = IV[:4, None]
    counter = np.broadcast_to(np.asarray(counter, dtype=np.uint64), (N,))
    s[12] = (counter & np.uint64(0xFFFFFFFF)).astype(np.uint32)
    s[13] = (counter >> np.uint64(32)).astype(np.uint32)
    s[14] = np.asarray(block_len, dtype=np.uint32)
    s[15] = np.asarray(flags, dtype=np.uint32)
    with np.errstate(over="ignore"):
        for r in range(7):
            order = SCHEDULE[r]
            for half in (0, 1):
                idx = _G_INDEX[4 * half: 4 * half + 4]
                a, b, c, d = idx[:, 0], idx[:, 1], idx[:, 2], idx[:, 3]
                mx = m[order[8 * half + 0: 8 * half + 8: 2]]
                my = m[order[8 * half + 1: 8 * half + 8: 2]]
                sa, sb, sc, sd = s[a], s[b], s[c], s[d]
                sa = sa + sb + mx
                sd = _rotr(sd ^ sa, 16)
                sc = sc + sd
                sb = _rotr(sb ^ sc, 12)
                sa = sa + sb + my
                sd = _rotr(sd ^ sa, 8)
                sc = sc + sd
                sb = _rotr(sb ^ sc, 7)
                s[a], s[b], s[c], s[d] = sa, sb, sc, sd
    out = np.empty((16, N), dtype=np.uint32)
    out[:8] = s[:8] ^ s[8:]
    out[8:] = s[8:] ^ cv
    return out


def _words(block: bytes | np.ndarray) -> np.ndarray:
    buf = np.zeros(BLOCK_LEN, dtype=np.uint8)
    raw = np.frombuffer(bytes(block), dtype=np.uint8)
    buf[: raw.size] = raw
    return buf.view("<u4").astype(np.uint32)


def _parents_np(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    m = np.concatenate([left, right], axis=0)
    cv = np.broadcast_to(IV[:, None], (8, m.shape[1]))
    return _compress_np(cv, m, 0, BLOCK_LEN, PARENT)[:8]


def _subtree_np(cvs: np.ndarray) -> np.ndarray:
    # cvs is (8, 2**k); merge adjacent pairs until one remains
    while cvs.shape[1] > 1:
        cvs = _parents_np(cvs[:, 0::2], cvs[:, 1::2])
    return cvs[:, 0]


def digest_numpy(data, out_len: int = OUT_LEN) -> bytes:
    buf = _as_u8(data)
    n = buf.size
    nchunks = max(1, -(-n // CHUNK_LEN))
    nfull = nchunks - 1

    stack: list[np.ndarray] = []
    if nfull:
        words = buf[: nfull * CHUNK_LEN].view("<u4").astype(np.uint32)
        words = words.reshape(nfull, 16, 16).transpose(1, 2, 0)  # block, word, chunk
        cv = np.repeat(IV[:, None], nfull, axis=1)
        counters = np.arange(nfull, dtype=np.uint64)
        for b in range(16):
            flags = (CHUNK_START if b == 0 else 0) | (CHUNK_END if b == 15 else 0)
            cv = _compress_np(cv, words[b], counters, BLOCK_LEN, flags)[:8]
        # the stack after pushing nfull chunks holds one complete subtree per set bit
        pos = 0
        for bit in reversed(range(nfull.bit_length())):
            size = 1 << bit
            if nfull & size:
                stack.append(_subtree_np(cv[:, pos: pos + size]))
                pos += size

    last = buf[nfull * CHUNK_LEN:]
    nblocks = max(1, -(-last.size // BLOCK_LEN))
    cv = IV[:, None].copy()
    for b in range(nblocks - 1):
        flags = CHUNK_START if b == 0 else 0
        m = _words(last[b * BLOCK_LEN: (b + 1) * BLOCK_LEN])[:, None]
        cv = _compress_np(cv, m, nfull, BLOCK_LEN, flags)[:8]
    tail = last[(nblocks - 1) * BLOCK_LEN:]
    node = (cv, _words(tail)[:, None], nfull, tail.size,
            CHUNK_END | (CHUNK_START if nblocks == 1 else 0))

    for left in reversed(stack):
        node_cv = _compress_np(*node)[:8]
        m = np.concatenate([left[:, None], node_cv], axis=0)
        node = (IV[:, None].copy(), m, 0, BLOCK_LEN, PARENT)

    cv, m, _, block_len, flags = node
    nout = -(-out_len // BLOCK_LEN)
    counters = np.arange(nout, dtype=np.uint64)
    full = _compress_np(np.repeat(cv, nout, axis=1), np.repeat(m, nout, axis=1),
                        counters, block_len, flags | ROOT)
    return full.T.astype("<u4").tobytes()[:out_len]


def _as_u8(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return np.ascontiguousarray(data).reshape(-1).view(np.uint8)
    return np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)


digest = digest_numba if USE_NUMBA else digest_numpy
