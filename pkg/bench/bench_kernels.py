"""Time the compiled and pure-Python coordinate-descent backends on lasso paths.

Usage: python3 bench/bench_kernels.py [--q 50 200] [--repeat 3]
"""
import argparse
import time

import numpy as np

from dyndml import _kernels
from dyndml.regression import lambda_grid


def problem(n, q, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, q))
    beta = np.zeros(q)
    beta[:5] = 1.0
    y = X @ beta + rng.standard_normal(n)
    X -= X.mean(0)
    y -= y.mean()
    G = X.T @ X / n
    c = X.T @ y / n
    return G, c, lambda_grid(float(np.abs(c).max()), 30, 1e-2)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--q", type=int, nargs="+", default=[50, 200, 450])
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    impls = _kernels.backends()
    print(f"{'q':>5} " + " ".join(f"{name:>12}" for name in impls) + "  speedup")
    for q in args.q:
        G, c, grid = problem(args.n, q, q)
        w = np.ones(q)
        times = {}
        for name, (_, cd_path) in impls.items():
            best = np.inf
            for _ in range(args.repeat):
                t0 = time.perf_counter()
                cd_path(G, c, grid, w, None, 1e-7, 10000)
                best = min(best, time.perf_counter() - t0)
            times[name] = best
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{q:>5} " + " ".join(f"{times[k]:>11.4f}s" for k in impls) + f"  {speed:7.1f}x")


if __name__ == "__main__":
    main()
