import json
from pathlib import Path

import blake3 as blake3_ref
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ufo.kernels import blake3
from ufo.store import hash_window

VECTORS = json.loads((Path(__file__).parent / "data" / "blake3_test_vectors.json").read_text())
CASES = VECTORS["cases"]


def vector_input(n):
    return (np.arange(n) % 251).astype(np.uint8)


@pytest.mark.parametrize("impl", [blake3.digest_numba, blake3.digest_numpy], ids=["numba", "numpy"])
@pytest.mark.parametrize("case", CASES, ids=[str(c["input_len"]) for c in CASES])
def test_official_vectors(impl, case):
    data = vector_input(case["input_len"])
    full = bytes.fromhex(case["hash"])
    assert impl(data) == full[:32]
    assert impl(data, len(full)) == full


def test_hash_window_is_256_bit_default():
    data = vector_input(1025)
    assert hash_window(data) == bytes.fromhex(CASES[[c["input_len"] for c in CASES].index(1025)]["hash"])[:32]


@settings(max_examples=60, deadline=None)
@given(st.binary(max_size=5000))
def test_matches_reference_package(b):
    data = np.frombuffer(b, dtype=np.uint8)
    ref = blake3_ref.blake3(b).digest()
    assert blake3.digest_numba(data) == ref
    assert blake3.digest_numpy(data) == ref


@pytest.mark.parametrize("n", [0, 1, 1023, 1024, 1025, 2048, 3 * 1024 + 7, 1 << 16, (1 << 20) + 1])
def test_boundary_lengths_against_reference(n):
    data = np.random.default_rng(n).integers(0, 256, n, dtype=np.uint8)
    ref = blake3_ref.blake3(data.tobytes()).digest()
    assert blake3.digest_numba(data) == ref
    assert blake3.digest_numpy(data) == ref


def test_single_bit_flip_changes_digest():
    data = np.zeros(1 << 20, dtype=np.uint8)
    before = hash_window(data)
    data[12345] ^= 1
    assert hash_window(data) != before
