"""Time the compiled network kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--width 100] [--depth 2] [--dim 10] [--repeat 5]

Prints one CSV row per kernel: kernel,width,depth,compiled_us,python_us,speedup.
Timings are the best of ``--repeat`` runs, in microseconds per call.
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from mcnb.core import _fallback

try:
    from mcnb.core import _kernels
except ImportError:
    _kernels = None


def cases(d, m, L, rng):
    p = m * d + (L - 2) * m * m + m
    theta = rng.normal(0.0, np.sqrt(2.0 / m), p)
    x = rng.standard_normal(d)
    x /= np.linalg.norm(x)
    n_rows = 32
    X = rng.standard_normal((n_rows, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    r = rng.uniform(0.0, 1.0, n_rows)
    order = np.arange(n_rows, dtype=np.int64)
    thetas = np.tile(theta, (30, 1))
    g = np.empty(p)
    out30 = np.empty(30)

    def make(mod):
        th = theta.copy()
        m1, m2 = np.zeros(p), np.zeros(p)
        return {
            "forward": lambda: mod.forward(theta, x, d, m, L),
            "gradient": lambda: mod.gradient(theta, x, d, m, L, g),
            "forward_many_30": lambda: mod.forward_many(thetas, x, d, m, L, out30),
            "sgd_pass_32": lambda: mod.sgd_pass(th, X, r, order, 1e-4, d, m, L),
            "adam_pass_32": lambda: mod.adam_pass(th, m1, m2, 0, X, r, order, 1e-4, 0.9, 0.999, 1e-8, d, m, L),
            "mean_loss_grad_32": lambda: mod.mean_loss_grad(theta, X, r, order, d, m, L, g),
        }

    return make


def best_us(fn, repeat):
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n * 1e6


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--width", type=int, default=100)
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--dim", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; only the fallback is available", file=sys.stderr)
    make = cases(args.dim, args.width, args.depth, np.random.default_rng(args.seed))
    py = make(_fallback)
    cc = make(_kernels) if _kernels is not None else None
    w = csv.writer(sys.stdout)
    w.writerow(["kernel", "width", "depth", "compiled_us", "python_us", "speedup"])
    for name, fn in py.items():
        t_py = best_us(fn, args.repeat)
        t_cc = best_us(cc[name], args.repeat) if cc else float("nan")
        w.writerow([name, args.width, args.depth, f"{t_cc:.2f}", f"{t_py:.2f}", f"{t_py / t_cc:.2f}"])


if __name__ == "__main__":
    main()
