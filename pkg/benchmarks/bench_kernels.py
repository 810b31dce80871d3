"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints median wall time per call for each backend and the speedup. Both
backends are checked for identical output before timing.
"""
import argparse
import statistics
import time

import numpy as np

from seriex import kernels


def _median_seconds(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def cases(rng):
    for n in (32, 128, 512):
        a = rng.integers(-8, 8, (n, n), dtype=np.int8)
        b = rng.integers(-8, 8, (n, n), dtype=np.int8)
        yield f"gemm_i8 {n}x{n}", "gemm_i8", (a, b)
    for bits in (2, 4):
        lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
        vals = rng.integers(lo, hi + 1, 1 << 20).astype(np.int64)
        yield f"pack_bits int{bits} 1M", "pack_bits", (vals, bits)
        payload = kernels.python.pack_bits(vals, bits)
        yield f"unpack_bits int{bits} 1M", "unpack_bits", (payload, bits, vals.size)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        print("compiled extension not available; only the numpy fallback would run")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'case':<24}{'compiled ms':>14}{'numpy ms':>12}{'speedup':>10}")
    for label, name, call_args in cases(rng):
        fast, slow = getattr(kernels.compiled, name), getattr(kernels.python, name)
        if not np.array_equal(np.asarray(fast(*call_args)), np.asarray(slow(*call_args))):
            raise SystemExit(f"{label}: backends disagree")
        t_c = _median_seconds(lambda: fast(*call_args), args.repeat)
        t_p = _median_seconds(lambda: slow(*call_args), args.repeat)
        print(f"{label:<24}{t_c * 1e3:>14.3f}{t_p * 1e3:>12.3f}{t_p / t_c:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
