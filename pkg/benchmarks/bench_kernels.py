"""Timing comparison for the two compute kernels that have a numba fast path.

Run as ``python benchmarks/bench_kernels.py``. The numpy fallback is always
measured; the numba variant is skipped with a note when the import failed or
``HARMONY_NUMBA=0`` disabled it. Reported numbers are best-of-``REPEATS``
wall times after a warmup call (which also absorbs JIT compilation).
"""

import time

import numpy as np

from harmony import accel

REPEATS = 5
JACOBI_SIZES = (16, 64, 128)
LEV_LENGTHS = (16, 64, 256)


def best_of(fn, *args):
    fn(*args)  # warmup; first numba call compiles
    best = float("inf")
    for _ in range(REPEATS):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_jacobi(rng):
    rows = []
    for n in JACOBI_SIZES:
        m = rng.normal(size=(n, n))
        sym = (m + m.T) / 2.0
        t_np = best_of(accel.jacobi_eigh_numpy, sym)
        t_nb = None
        if accel.USING_NUMBA:
            t_nb = best_of(accel.jacobi_eigh_numba, np.ascontiguousarray(sym))
        rows.append((f"jacobi_eigh {n}x{n}", t_np, t_nb))
    return rows


def bench_levenshtein(rng):
    rows = []
    for length in LEV_LENGTHS:
        a = rng.integers(0, 26, size=length).astype(np.int64)
        b = rng.integers(0, 26, size=length).astype(np.int64)
        t_np = best_of(accel.levenshtein_numpy, a, b)
        t_nb = None
        if accel.USING_NUMBA:
            t_nb = best_of(accel.levenshtein_numba, a, b)
        rows.append((f"levenshtein {length}x{length}", t_np, t_nb))
    return rows


def main():
    rng = np.random.default_rng(0)
    print(f"numba backend active: {accel.USING_NUMBA}")
    rows = bench_jacobi(rng) + bench_levenshtein(rng)
    header = f"{'kernel':<24} {'numpy':>12} {'numba':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, t_np, t_nb in rows:
        if t_nb is None:
            print(f"{name:<24} {t_np * 1e3:>10.3f}ms {'skipped':>12} {'-':>9}")
        else:
            print(f"{name:<24} {t_np * 1e3:>10.3f}ms {t_nb * 1e3:>10.3f}ms "
                  f"{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
