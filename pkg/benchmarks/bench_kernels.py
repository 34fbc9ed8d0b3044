"""Compiled vs numpy kernels: per-call time and an end-to-end detector run.

    python3 benchmarks/bench_kernels.py [--repeat 200]
"""
import argparse
import math
import time

import numpy as np

from gridoutage import _fallback, kernels
from gridoutage.detector import DetectorConfig, run_multi_threshold
from gridoutage.gaussian import IncrementDistribution, sample


def _best_of(fn, repeat):
    best = math.inf
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def bench_window_objective(repeat):
    rng = np.random.default_rng(0)
    lr, l1m = math.log(0.04), math.log1p(-0.04)
    rows = []
    for m in (1, 4, 8, 16, 32, 64, 128):
        x = rng.standard_normal((100, m))
        lg = -0.5 * np.sum(x * x, axis=1)
        mu = np.full(m, 0.1)
        sigma = np.eye(m) * 1.2
        impls = {"python": _fallback.window_objective}
        if "cython" in kernels.available_backends():
            from gridoutage import _kernels
            impls["cython"] = _kernels.window_objective
        times = {k: _best_of(lambda f=f: f(x, lg, mu, sigma, lr, l1m, 3), repeat) for k, f in impls.items()}
        rows.append((m, times))
    return rows


def bench_detector(trials):
    g = IncrementDistribution([0.0], [[0.5]])
    f = IncrementDistribution([1.0], [[0.2]])
    out = {}
    for name in kernels.available_backends():
        kernels.use_backend(name)
        t0 = time.perf_counter()
        for s in range(trials):
            rng = np.random.default_rng(s)
            lam = int(rng.geometric(0.04))
            x = np.concatenate([sample(g, rng, lam - 1), sample(f, rng, 400)])
            run_multi_threshold(x, g, DetectorConfig(mode="pgd"), [0.01])
        out[name] = time.perf_counter() - t0
    kernels.use_backend("cython" if "cython" in out else "python")
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--trials", type=int, default=20)
    args = ap.parse_args()
    print(f"backends: {kernels.available_backends()}")
    print("window_objective, N=100 (microseconds per call)")
    for m, t in bench_window_objective(args.repeat):
        cells = "  ".join(f"{k}={v * 1e6:8.1f}" for k, v in sorted(t.items()))
        ratio = t["python"] / t["cython"] if "cython" in t else float("nan")
        print(f"  M={m:3d}  {cells}  speedup={ratio:5.1f}x")
    print(f"pgd-mode detection, {args.trials} scalar trials (seconds)")
    for k, v in bench_detector(args.trials).items():
        print(f"  {k:7s} {v:7.2f}")


if __name__ == "__main__":
    main()
