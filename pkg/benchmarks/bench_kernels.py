#!/usr/bin/env python3
"""Benchmark the per-step timing kernels: numba @njit vs the pure Python path.

The simulator calls these once per prefill/decode step, so their cost bounds
how fast large sweeps run.  Usage:

    python3 benchmarks/bench_kernels.py [--calls 50000]

Set MODSCALE_NUMBA=0 to verify the package still works (slower) without JIT.
"""

import argparse
import time

import numpy as np

from modscale._kernels import (
    HAS_JIT,
    comm_units,
    comm_units_py,
    work_units,
    work_units_py,
)


def make_arrays(n_layers: int, replicated: int, dop: int):
    ptr = [0]
    caps: list[float] = []
    for li in range(n_layers):
        p = dop if li < replicated else 1
        caps.extend([312000.0] * p)
        ptr.append(len(caps))
    n_runs = max(1, min(3, replicated))
    return (
        np.asarray(ptr, dtype=np.int64),
        np.asarray(caps, dtype=np.float64),
        np.full(n_runs, dop, dtype=np.int64),
        np.full(n_runs, 25000.0, dtype=np.float64),
    )


def bench(fn_w, fn_c, arrays, calls: int) -> float:
    ptr, caps, run_p, run_bw = arrays
    # warm-up triggers JIT compilation so it is not measured
    fn_w(16, 1, ptr, caps, 5120.0)
    fn_c(16, 1, run_p, run_bw, 5120.0)
    t0 = time.perf_counter()
    acc = 0.0
    for i in range(calls):
        bs = 1 + (i & 63)
        acc += fn_w(bs, 1, ptr, caps, 5120.0)
        acc += fn_c(bs, 1, run_p, run_bw, 5120.0)
    took = time.perf_counter() - t0
    assert acc > 0
    return took


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--calls", type=int, default=50_000)
    args = parser.parse_args()

    shapes = [
        ("baseline 40 layers", make_arrays(40, 0, 1)),
        ("30 layers dop 2", make_arrays(40, 30, 2)),
        ("20 layers dop 4", make_arrays(40, 20, 4)),
    ]
    print(f"jit available: {HAS_JIT}  ({args.calls} calls per cell)")
    header = f"{'shape':<22} {'python':>12} {'active':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, arrays in shapes:
        t_py = bench(work_units_py, comm_units_py, arrays, args.calls)
        t_active = bench(work_units, comm_units, arrays, args.calls)
        ratio = t_py / t_active if t_active > 0 else float("inf")
        print(f"{name:<22} {t_py:>10.3f} s {t_active:>10.3f} s {ratio:>8.1f}x")
    if not HAS_JIT:
        print("note: numba unavailable or disabled; 'active' is the Python path")


if __name__ == "__main__":
    main()
