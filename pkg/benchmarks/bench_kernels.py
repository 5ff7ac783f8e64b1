"""Compare the compiled and NumPy kernel backends.

    python benchmarks/bench_kernels.py [--paths 256] [--steps 1000] [--m 8] [--repeat 3]

Reports the best-of-``repeat`` wall time per kernel and backend, plus the
largest relative difference between backends on identical inputs.
"""

import argparse
import time

import numpy as np

from spdectl import kernels
from spdectl.operators import laplace_matrix
from spdectl.space import build_space


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_em(impl, args, space, rng):
    P, N, m = args.paths, args.steps, args.m
    dt = 0.1 / N
    X0 = rng.standard_normal((P, m))
    dW = rng.standard_normal((P, N, m)) * np.sqrt(dt)
    M = laplace_matrix(space, 1.0)
    K = 0.3 * rng.standard_normal((m, m))
    kt = np.array([0.0, 0.05, 0.1])
    kc = rng.standard_normal((3, m))
    out = np.empty((P, N + 1, m))

    def run():
        impl.em_affine(X0, dW, M, dt, K, kt, kc, 5.0, kernels.NOISE_MULTIPLICATIVE, 0.2,
                       0, 1.0, None, out)
        return out.copy()

    return best_of(run, args.repeat)


def bench_plaplace(impl, args, space, rng):
    U = rng.standard_normal((args.paths, args.m))
    return best_of(lambda: impl.plaplace_dual(U, space.basis_derivs, space.weights, 4.0),
                   args.repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--paths", type=int, default=256)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--m", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    space = build_space(m=args.m, alpha=4.0)
    impls = kernels.backends()
    print(f"paths={args.paths} steps={args.steps} m={args.m}  backends: {', '.join(impls)}")
    for name, bench in (("em_affine", bench_em), ("plaplace_dual", bench_plaplace)):
        results = {b: bench(impl, args, space, np.random.default_rng(0))
                   for b, impl in impls.items()}
        line = [f"{name:14s}"] + [f"{b}: {t * 1e3:9.2f} ms" for b, (t, _) in results.items()]
        if "cython" in results:
            ref = results["python"]
            line.append(f"speedup x{ref[0] / results['cython'][0]:.1f}")
            diff = np.nanmax(np.abs(ref[1] - results["cython"][1])) / np.nanmax(np.abs(ref[1]))
            line.append(f"rel diff {diff:.2e}")
        print("  ".join(line))


if __name__ == "__main__":
    main()
