"""Compare the numba kernels with their pure-numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--size-mib N] [--repeat K]
Each kernel is run once to warm up, then timed ``repeat`` times; the best
time is reported.
"""

import argparse
import os
import tempfile
import time

import numpy as np

from ufo import backends
from ufo.bench import _identity_loop_nb, _identity_loop_np
from ufo.kernels import blake3, csvparse


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def make_csv(rows):
    rng = np.random.default_rng(1)
    a = rng.integers(-10**6, 10**6, rows)
    b = rng.random(rows)
    body = "\n".join(f"{x},{y:.6f},{i}" for i, (x, y) in enumerate(zip(a, b)))
    fd, path = tempfile.mkstemp(suffix=".csv")
    with os.fdopen(fd, "w") as fh:
        fh.write("a,b,c\n" + body + "\n")
    return path


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size-mib", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    nbytes = args.size_mib << 20
    data = np.random.default_rng(0).integers(0, 256, nbytes, dtype=np.uint8)
    ints = data.view(np.int32)
    out32 = np.empty(nbytes // 4, dtype=np.int32)
    csv_path = make_csv(200_000)
    csv_bytes = np.fromfile(csv_path, dtype=np.uint8)
    start = int(np.flatnonzero(csv_bytes == 10)[0]) + 1

    cases = [
        ("blake3", lambda: blake3.digest_numba(data), lambda: blake3.digest_numpy(data), nbytes),
        ("seq fill",
         lambda: backends._seq_fill_nb(out32, np.int64(0), np.int64(1), np.int64(1)),
         lambda: backends._seq_fill_np(out32, np.int64(0), np.int64(1), np.int64(1)), nbytes),
        ("csv scan",
         lambda: csvparse.scan(csv_bytes, start, 3, 1000, use_numba=True),
         lambda: csvparse.scan(csv_bytes, start, 3, 1000, use_numba=False), csv_bytes.size),
        ("csv int column",
         lambda: csvparse.parse_column(csv_bytes[start:], 0, 200_000, 0, "int64", use_numba=True),
         lambda: csvparse.parse_column(csv_bytes[start:], 0, 200_000, 0, "int64", use_numba=False),
         csv_bytes.size),
        ("identity loop", lambda: _identity_loop_nb(ints[:1 << 20]),
         lambda: _identity_loop_np(ints[:1 << 20]), 4 << 20),
    ]
    print(f"{'kernel':<16}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'numba MiB/s':>13}")
    for name, nb, npf, size in cases:
        t_nb = best_of(nb, args.repeat)
        t_np = best_of(npf, args.repeat)
        print(f"{name:<16}{t_nb * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_nb:>9.1f}"
              f"{size / t_nb / 2**20:>13.1f}")
    os.unlink(csv_path)


if __name__ == "__main__":
    main()
