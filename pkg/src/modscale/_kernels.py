"""Hot numeric kernels for per-step timing, JIT-compiled when numba is available.

The simulator evaluates per-layer compute work and span-boundary communication
once per prefill and once per decode step, tens of thousands of times per run,
so these loops carry ``@njit``.  Set ``MODSCALE_NUMBA=0`` to force the pure
Python/NumPy fallback (same code, interpreted); ``benchmarks/bench_kernels.py``
compares the two paths.
"""

from __future__ import annotations

import os

import numpy as np


def _work_units(bs, l, layer_ptr, caps, d_model):
    """Sum over layers of the slowest replica's share: d^2 * bs_ij * l / C_ij.

    Shares follow the integer even split: with p replicas and r = bs mod p,
    the first p - r replicas process floor(bs/p) requests, the rest ceil.
    """
    d2 = d_model * d_model
    total = 0.0
    n = layer_ptr.shape[0] - 1
    for i in range(n):
        s = layer_ptr[i]
        p = layer_ptr[i + 1] - s
        q = bs // p
        r = bs - q * p
        worst = 0.0
        for j in range(p):
            share = q + 1 if j >= p - r else q
            v = d2 * share * l / caps[s + j]
            if v > worst:
                worst = v
        total += worst
    return total


def _comm_units(bs, l, run_min_p, run_bw, d_model):
    """One scatter/gather boundary per contiguous replicated run on a device.

    A run's share is the largest shard flowing through it, ceil(bs / min p_i).
    """
    total = 0.0
    for k in range(run_min_p.shape[0]):
        p = run_min_p[k]
        share = (bs + p - 1) // p
        total += d_model * share * l / run_bw[k]
    return total


work_units_py = _work_units
comm_units_py = _comm_units

_USE_NUMBA = os.environ.get("MODSCALE_NUMBA", "1").strip().lower() not in ("0", "false", "off")

HAS_JIT = False
if _USE_NUMBA:
    try:
        from numba import njit

        work_units = njit(cache=True)(_work_units)
        comm_units = njit(cache=True)(_comm_units)
        HAS_JIT = True
    except ImportError:
        work_units = _work_units
        comm_units = _comm_units
else:
    work_units = _work_units
    comm_units = _comm_units


EMPTY_I8 = np.empty(0, dtype=np.int64)
EMPTY_F8 = np.empty(0, dtype=np.float64)
