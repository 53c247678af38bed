"""Hot numeric kernels.

Every kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The numba path is used when numba imports and ``UFO_NUMBA`` is not set to
``0``; the choice is made once, at import time.  Both paths are importable
regardless, so tests and benchmarks can compare them directly.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _flag_enabled() -> bool:
    return os.environ.get("UFO_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = numba is not None and _flag_enabled()


def njit(fn=None, **options):
    """``numba.njit`` with caching on; a no-op decorator without numba."""
    if fn is None:
        return lambda f: njit(f, **options)
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(cache=True, nogil=True, **options)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
