"""``ufobench``: run create/sum/loop benchmarks and generate input files."""

from __future__ import annotations

import sys

import click

from . import bench


def _bench_options(fn):
    options = [
        click.option("--backend", type=click.Choice(bench.BACKENDS), default="seq", show_default=True),
        click.option("--mode", type=click.Choice(bench.MODES), default="ufo", show_default=True),
        click.option("--size-bytes", type=int, default=bench.DESK_SIZE, show_default=True),
        click.option("--iters", type=int, default=bench.DESK_ITERS, show_default=True),
        click.option("--chunk-size", type=int, default=1 << 20, show_default=True),
        click.option("--high-water", type=int, default=bench.DESK_HIGH, show_default=True),
        click.option("--low-water", type=int, default=bench.DESK_LOW, show_default=True),
        click.option("--path", type=click.Path(dir_okay=False), default=None,
                     help="Input file for the file backend (see gen-file)."),
        click.option("--out", type=click.Path(dir_okay=False), default=None,
                     help="CSV file to append rows to; stdout when omitted."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _run(op, backend, mode, size_bytes, iters, chunk_size, high_water, low_water, path, out):
    if size_bytes < 0 or iters < 0:
        raise click.BadParameter("--size-bytes and --iters must be >= 0")
    try:
        result = bench.run_bench(op, backend, mode, size_bytes, iters, chunk_size,
                                 high_water, low_water, path)
    except (bench.BenchError, ValueError) as exc:
        raise click.ClickException(str(exc)) from None
    bench.write_records(result.records, out if out else sys.stdout)
    if result.counters is not None:
        c = result.counters
        click.echo(f"# populate_calls={c.populate_calls} hash_calls={c.hash_calls} "
                   f"evictions={c.evictions} peak_resident={c.peak_resident}", err=True)


@click.group()
def main():
    """Microbenchmarks for lazily materialized arrays."""


@main.command()
@_bench_options
def create(**kw):
    """Time allocate + free."""
    _run("create", **kw)


@main.command(name="sum")
@_bench_options
def sum_(**kw):
    """Time a chunked sum over the whole array."""
    _run("sum", **kw)


@main.command()
@_bench_options
def loop(**kw):
    """Time an element-by-element identity pass."""
    _run("loop", **kw)


@main.command(name="gen-file")
@click.option("--path", type=click.Path(dir_okay=False), required=True)
@click.option("--count", type=int, required=True)
@click.option("--pattern", type=click.Choice(bench.PATTERNS), default="index", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--value", type=int, default=5, show_default=True, help="Value for the constant pattern.")
def gen_file(path, count, pattern, seed, value):
    """Write COUNT little-endian int32 elements to PATH."""
    try:
        bench.gen_file(path, count, pattern, seed, value)
    except (bench.BenchError, OSError) as exc:
        raise click.ClickException(str(exc)) from None


if __name__ == "__main__":
    main()
