import os
import subprocess
import sys

import numpy as np
import pytest

from ssmcast import _kernels_py
from ssmcast._backend import KernelLinAlgError
from ssmcast.lgssm import LgssmParams

compiled = pytest.importorskip("ssmcast._kernels", reason="compiled extension not built")


def _args(n, T, z, o, i, seed, lengths=None):
    p = LgssmParams.random(z, o, i, seed)
    rng = np.random.default_rng(seed)
    x, u = rng.normal(size=(n, T, o)), rng.normal(size=(n, T, i))
    lengths = np.full(n, T) if lengths is None else np.asarray(lengths)
    return (p.A, p.B, p.C, p.D, p.Q, p.R, p.U, p.m0, p.P0, x, u, lengths)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("flag", [True, False])
def test_filter_parity(seed, flag):
    args = _args(4, 7, 1 + seed % 3, 2 + seed % 2, 1 + seed % 2, seed, lengths=[7, 3, 5, 1])
    a = _kernels_py.kalman_filter(*args, flag)
    b = compiled.kalman_filter(*args, flag)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-11, atol=1e-11)


def test_padding_is_ignored():
    args = _args(2, 6, 2, 3, 2, 0, lengths=[6, 4])
    full = compiled.kalman_filter(*args, True)
    x, u = args[9].copy(), args[10].copy()
    x[1, 4:] = 1e6
    u[1, 4:] = -1e6
    pad = compiled.kalman_filter(*args[:9], x, u, args[11], True)
    assert full[0][1] == pad[0][1]


def test_locf_parity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 7))
    mask = rng.random((50, 7)) < 0.3
    np.testing.assert_array_equal(_kernels_py.locf_fill(x, mask), compiled.locf_fill(x, mask))


def test_continuation_parity():
    rng = np.random.default_rng(1)
    u = rng.normal(size=(60, 4))
    mask = rng.random((60, 4)) < 0.25
    thr = np.array([1, 3, 6, 100], dtype=np.int64)
    np.testing.assert_array_equal(_kernels_py.continue_interventions(u, mask, thr),
                                  compiled.continue_interventions(u, mask, thr))


@pytest.mark.parametrize("k", [_kernels_py, compiled], ids=["python", "cython"])
def test_singular_reports_time(k):
    A, B, C, D, Q, R, U, m0, P0, x, u, lengths = _args(1, 3, 2, 2, 1, 0)
    neg = -np.eye(2)  # beyond any jitter
    with pytest.raises(KernelLinAlgError) as e:
        k.kalman_filter(A, B, np.zeros_like(C), D, Q, neg, U, m0, P0, x, u, lengths, False)
    assert e.value.t == 1


def test_env_forces_python_backend():
    env = dict(os.environ, SSMCAST_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from ssmcast._backend import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    env["SSMCAST_PURE_PYTHON"] = "0"
    out = subprocess.run([sys.executable, "-c", "from ssmcast._backend import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "cython"
