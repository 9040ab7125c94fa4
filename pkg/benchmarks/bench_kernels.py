"""Time the numba kernels against their pure-numpy counterparts.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Compilation happens in a warm-up call and is reported separately.
"""

import argparse
import time

import numpy as np

from trpoppo.kernels import NUMBA_KERNELS, NUMPY_KERNELS


def _cases(rng):
    n = 2048
    rewards, values = rng.normal(size=n), rng.normal(size=n)
    dones = np.zeros(n)
    dones[7::8] = 1.0
    yield "gae (T=2048)", lambda k: k["gae"](rewards, values, dones, 0.0, 0.99, 0.95)

    scores = np.sort(np.round(rng.normal(size=20000), 3))[::-1].copy()
    labels = (rng.random(scores.size) < 0.2).astype(float)
    yield "auprc (n=20000)", lambda k: k["auprc"](scores, labels)

    size = 80_000
    params, grad = rng.normal(size=size), rng.normal(size=size)
    m, v = np.zeros(size), np.zeros(size)
    yield "adam (80k params)", lambda k: k["adam"](params, grad, m, v, 3e-4, 0.9, 0.999, 1e-8, 1)


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()

    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'compile s':>11}")
    for name, call in _cases(np.random.default_rng(0)):
        t0 = time.perf_counter()
        call(NUMBA_KERNELS)
        compile_s = time.perf_counter() - t0
        slow = _time(lambda: call(NUMPY_KERNELS), args.repeat)
        fast = _time(lambda: call(NUMBA_KERNELS), args.repeat)
        print(f"{name:<20}{slow * 1e3:>12.3f}{fast * 1e3:>12.3f}{slow / fast:>9.1f}x{compile_s:>11.2f}")


if __name__ == "__main__":
    main()
