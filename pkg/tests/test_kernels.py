import numpy as np
import pytest

from modscale import _kernels
from modscale._kernels import comm_units, comm_units_py, work_units, work_units_py


def random_arrays(rng, n_layers=40, max_p=4):
    ptr = [0]
    caps = []
    for _ in range(n_layers):
        p = int(rng.integers(1, max_p + 1))
        caps.extend(rng.uniform(1e4, 4e5, size=p).tolist())
        ptr.append(len(caps))
    n_runs = int(rng.integers(0, 12))
    return (
        np.asarray(ptr, dtype=np.int64),
        np.asarray(caps, dtype=np.float64),
        rng.integers(2, 5, size=n_runs).astype(np.int64),
        rng.uniform(1e3, 1e5, size=n_runs).astype(np.float64),
    )


class TestKernelPaths:
    def test_jit_matches_python_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            ptr, caps, run_p, run_bw = random_arrays(rng)
            bs = int(rng.integers(1, 128))
            l = int(rng.integers(1, 512))
            assert work_units(bs, l, ptr, caps, 5120.0) == work_units_py(bs, l, ptr, caps, 5120.0)
            assert comm_units(bs, l, run_p, run_bw, 5120.0) == comm_units_py(bs, l, run_p, run_bw, 5120.0)

    def test_jit_enabled_by_default(self):
        # numba is a declared dependency; the env flag selects the fallback
        import os

        if os.environ.get("MODSCALE_NUMBA", "1").lower() in ("0", "false", "off"):
            assert not _kernels.HAS_JIT
        else:
            assert _kernels.HAS_JIT

    def test_env_flag_selects_fallback(self):
        import subprocess
        import sys

        code = (
            "from modscale import _kernels; "
            "print(_kernels.HAS_JIT, _kernels.work_units is _kernels.work_units_py)"
        )
        out = subprocess.run(
            [sys.executable, "-c", code],
            env={"PATH": "/usr/bin:/bin", "MODSCALE_NUMBA": "0"},
            capture_output=True, text=True, check=True,
        )
        assert out.stdout.split() == ["False", "True"]

    def test_empty_arrays(self):
        from modscale._kernels import EMPTY_F8, EMPTY_I8

        ptr = np.asarray([0], dtype=np.int64)
        assert work_units(8, 1, ptr, EMPTY_F8, 512.0) == 0.0
        assert comm_units(8, 1, EMPTY_I8, EMPTY_F8, 512.0) == 0.0

    def test_integer_split_shares(self):
        # one layer, three replicas, bs=10 -> shares 3/3/4; worst share 4
        ptr = np.asarray([0, 3], dtype=np.int64)
        caps = np.asarray([2.0, 2.0, 2.0], dtype=np.float64)
        w = work_units(10, 1, ptr, caps, 1.0)
        assert w == pytest.approx(4 / 2.0)
