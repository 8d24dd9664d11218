import sys

import numpy as np
import pytest

from ssmcast.data.records import PatientRecord
from ssmcast.lgssm import LgssmParams


def make_record(x, u, pid="r0", step=1.0):
    """Fully observed record from raw arrays."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    u = np.asarray(u, dtype=np.float64).reshape(len(u), -1)
    return PatientRecord(
        pid, x, np.ones(x.shape, bool), u, np.ones(u.shape, bool),
        [f"obs_{j:02d}" for j in range(x.shape[1])], [f"int_{j:02d}" for j in range(u.shape[1])], step,
    )


def diagonal_params(z, o, i, seed, noise=0.3):
    """Random stable system with diagonal covariances (representable by the deep model)."""
    p = LgssmParams.random(z, o, i, seed, noise=noise)
    rng = np.random.default_rng(seed + 1000)
    return LgssmParams(
        A=p.A, B=p.B, C=p.C, D=p.D,
        Q=np.diag(noise * rng.uniform(0.5, 1.5, z)), R=np.diag(noise * rng.uniform(0.5, 1.5, o)),
        U=np.diag(noise * rng.uniform(0.5, 1.5, i)), m0=p.m0, P0=np.diag(rng.uniform(0.5, 1.5, z)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
