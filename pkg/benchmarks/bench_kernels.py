"""Compare the compiled and pure-Python series kernels.

Micro benchmarks time each kernel on random data; the end-to-end run
solves the IEEE 118-bus case from a flat germ in a child process with
each backend forced through ``FFHEFLOW_PURE_PYTHON``.

    python benchmarks/bench_kernels.py [--repeat 7] [--terms 30]
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ffheflow import _pykernels

try:
    from ffheflow import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

SOLVE = """
import time
from ffheflow import pseries
from ffheflow.ffhe import make_germ, solve_ffhe
from ffheflow.netmodel import builtin_case
from ffheflow.system import prepare_system
system = prepare_system(builtin_case())
germ = make_germ(system, strategy="flat")
solve_ffhe(system, germ=germ)
best = min(
    (lambda t: (solve_ffhe(system, germ=germ), time.perf_counter() - t)[1])(time.perf_counter())
    for _ in range({repeat})
)
print(pseries.BACKEND, best)
"""


def micro(mod, terms: int, cols: int, repeat: int) -> dict:
    rng = np.random.default_rng(0)
    A = rng.normal(size=(terms, cols)) + 1j * rng.normal(size=(terms, cols))
    B = rng.normal(size=(terms, cols)) + 1j * rng.normal(size=(terms, cols))
    a, b = A[:, 0].copy(), B[:, 0].copy()
    F = a.copy()
    F[0] = 1.0
    M = np.abs(a)
    n = terms - 1
    cases = {
        "conv_sum": lambda: mod.conv_sum(a, b, 0, n, n, True),
        f"conv_columns ({cols} cols)": lambda: mod.conv_columns(A, B, n, True),
        "reciprocal_next": lambda: mod.reciprocal_next(F, a, n),
        "magnitude_next": lambda: mod.magnitude_next(M, a, n),
    }
    out = {}
    for name, fn in cases.items():
        number = 200
        out[name] = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
    return out


def end_to_end(pure: bool, repeat: int) -> tuple[str, float]:
    env = dict(os.environ)
    env.pop("FFHEFLOW_PURE_PYTHON", None)
    if pure:
        env["FFHEFLOW_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", SOLVE.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=7)
    p.add_argument("--terms", type=int, default=30)
    p.add_argument("--cols", type=int, default=240)
    args = p.parse_args(argv)

    py = micro(_pykernels, args.terms, args.cols, args.repeat)
    cy = micro(_ckernels, args.terms, args.cols, args.repeat) if _ckernels else {}
    print(f"{'kernel':28s} {'python (us)':>12s} {'cython (us)':>12s} {'speedup':>8s}")
    for name, t in py.items():
        c = cy.get(name)
        cs = f"{c * 1e6:12.2f}" if c else f"{'n/a':>12s}"
        sp = f"{t / c:7.1f}x" if c else f"{'':>8s}"
        print(f"{name:28s} {t * 1e6:12.2f} {cs} {sp}")

    print()
    runs = [end_to_end(True, args.repeat)]
    if _ckernels:
        runs.append(end_to_end(False, args.repeat))
    for backend, t in runs:
        print(f"118-bus flat-germ solve, {backend:6s} kernels: {t * 1e3:8.2f} ms")
    return 0


if __name__ == "__main__":
    sys.exit(main())
