"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Both backends are imported directly, so the environment switch is not needed.
Outputs are checked for agreement before any timing is reported.
"""

from __future__ import annotations

import argparse
import json
import platform
import timeit

import numpy as np

from ssmcast import _kernels_py
from ssmcast.lgssm import LgssmParams

try:
    from ssmcast import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def _filter_case(n, T, z, o, i, seed=0):
    p = LgssmParams.random(z, o, i, seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, T, o))
    u = rng.normal(size=(n, T, i))
    args = (p.A, p.B, p.C, p.D, p.Q, p.R, p.U, p.m0, p.P0, x, u, np.full(n, T), True)
    return lambda k: k.kalman_filter(*args)


def _locf_case(T, d, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(T, d))
    mask = rng.random((T, d)) < 0.3
    return lambda k: k.locf_fill(x, mask)


def _continue_case(T, d, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(T, d))
    mask = rng.random((T, d)) < 0.2
    thr = np.full(d, 6, dtype=np.int64)
    return lambda k: k.continue_interventions(u, mask, thr)


CASES = {
    "kalman_filter n=1 T=96 z=3": _filter_case(1, 96, 3, 6, 2),
    "kalman_filter n=64 T=96 z=8 o=96 i=14": _filter_case(64, 96, 8, 96, 14),
    "locf_fill T=1000 d=96": _locf_case(1000, 96),
    "continue_interventions T=1000 d=14": _continue_case(1000, 14),
}


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-10)


def run(repeat: int = 5) -> list[dict]:
    rows = []
    for name, case in CASES.items():
        row = {"case": name}
        backends = {"python": _kernels_py}
        if _kernels_c is not None:
            backends["cython"] = _kernels_c
            if not _same(case(_kernels_py), case(_kernels_c)):
                raise AssertionError(f"{name}: backends disagree")
        for label, k in backends.items():
            number = max(1, int(0.2 / max(timeit.timeit(lambda: case(k), number=1), 1e-6)))
            best = min(timeit.repeat(lambda: case(k), number=number, repeat=repeat)) / number
            row[f"{label}_ms"] = 1e3 * best
        if "cython_ms" in row:
            row["speedup"] = row["python_ms"] / row["cython_ms"]
        rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    rows = run(args.repeat)
    print(f"python {platform.python_version()}, numpy {np.__version__}, compiled={'yes' if _kernels_c else 'no'}")
    print(f"{'case':42s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for r in rows:
        c = r.get("cython_ms")
        print(f"{r['case']:42s} {r['python_ms']:10.3f} "
              f"{'n/a' if c is None else f'{c:10.3f}':>10s} {r.get('speedup', float('nan')):8.1f}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
