import os

import numpy as np
import pytest

from ufo import Core, CoreParams
from ufo.fault import BackendUnavailable, UserfaultBackend

ACCEPTANCE_KEY = pytest.StashKey[list]()


def _userfault_available() -> bool:
    try:
        UserfaultBackend().close()
        return True
    except BackendUnavailable:
        return False


HAVE_USERFAULT = _userfault_available()
BACKEND_PARAMS = [
    pytest.param("userfault", marks=pytest.mark.skipif(not HAVE_USERFAULT,
                                                       reason="userfaultfd unavailable")),
    "soft",
]


def make_core(backend="auto", high=8 << 20, low=4 << 20, chunk=1 << 20, **kw) -> Core:
    return Core(CoreParams(high_water=high, low_water=low, chunk_size=chunk, backend=backend, **kw))


@pytest.fixture(params=BACKEND_PARAMS)
def backend_name(request):
    return request.param


@pytest.fixture
def core(backend_name):
    c = make_core(backend_name)
    yield c
    c.shutdown()


@pytest.fixture
def int32_file(tmp_path):
    def make(n, pattern="index", seed=0):
        path = tmp_path / f"data-{n}-{pattern}-{seed}.bin"
        if pattern == "index":
            arr = np.arange(n, dtype="<i4")
        else:
            arr = np.random.default_rng(seed).integers(-(1 << 31), 1 << 31, n, dtype=np.int32)
        arr.astype("<i4").tofile(path)
        return str(path), arr
    return make


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance result; prints PASS/FAIL and re-raises failures."""
    results = request.config.stash[ACCEPTANCE_KEY]

    class _Criterion:
        def __init__(self, number, title):
            self.number, self.title, self.detail = number, title, ""

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            ok = exc_type is None
            detail = self.detail if ok else f"{exc_type.__name__}: {exc}"
            line = f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'}  {self.title}  [{detail}]"
            results.append(line)
            print(line)
            return False

    return _Criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
