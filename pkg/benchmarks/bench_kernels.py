"""Compare the compiled and numpy sketch kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints best-of-``repeat`` wall times per kernel and backend, the speedup, and
the K = 4096 / K = 2048 timing ratio of ``project`` at D = 768 (linear
scaling predicts 2).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ropim.sketch import BACKENDS, draw_sketch
from ropim.sketch import stats


def best_time(fn, repeat: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(K: int, D: int, rho=0.25, seed=0):
    spec = draw_sketch(K, rho, seed)
    X = np.random.default_rng(seed).standard_normal((K, D))
    Y = np.random.default_rng(seed + 1).standard_normal((spec.K_out, D))
    scale = spec.bucket_scale
    return {
        "project": lambda be: be.project(spec.h0, spec.s, X, spec.K_out),
        "retract": lambda be: be.retract(spec.h0, spec.s, scale, Y),
        "roundtrip": lambda be: be.roundtrip(spec.h0, spec.s, scale, X, spec.K_out),
        "complement": lambda be: be.complement(spec.h0, spec.s, scale, X, spec.K_out),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    names = sorted(BACKENDS)
    print(f"backends: {', '.join(names)}")
    rows = []
    for K, D in ((256, 48), (2048, 768), (4096, 768)):
        for kernel, call in kernel_cases(K, D).items():
            t = {n: best_time(lambda: call(BACKENDS[n]), args.repeat) for n in names}
            rows.append((f"{kernel} K={K} D={D}", t))
    x = np.random.default_rng(0).standard_normal(64)
    H0, S, _ = stats.draw_batch(64, 16, 0, 100_000)
    rows.append(("inner products K=64 M=1e5",
                 {n: best_time(lambda: BACKENDS[n].sketch_inner_products(H0, S, x, x, 16),
                               max(3, args.repeat // 5)) for n in names}))
    print(f"{'case':<32}" + "".join(f"{n:>12}" for n in names) + "     speedup")
    for label, t in rows:
        speed = t["numpy"] / t["cython"] if "cython" in t else float("nan")
        print(f"{label:<32}" + "".join(f"{t[n] * 1e3:10.3f}ms" for n in names)
              + f"   {speed:8.2f}x")
    for n in names:
        small = kernel_cases(2048, 768)["project"]
        big = kernel_cases(4096, 768)["project"]
        r = best_time(lambda: big(BACKENDS[n]), args.repeat) / best_time(
            lambda: small(BACKENDS[n]), args.repeat)
        print(f"project scaling K 4096/2048 ({n}): {r:.2f}")


if __name__ == "__main__":
    main()
