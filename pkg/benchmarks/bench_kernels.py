"""Compare the compiled and pure-Python kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on the same inputs under both backends; the table shows
the best wall time of ``N`` runs and the speedup of the compiled one.
"""

import argparse
import time

import numpy as np

from randbal import _kernels_py as python

try:
    from randbal import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    out = []
    for k in (20, 60):
        a = rng.standard_normal((k, k))
        a = a @ a.T
        out.append((f"jacobi_eigh k={k}", "jacobi_eigh", (a,)))

    # 200 chains over blocks of 40 clusters, 10 treated, 2000 proposals each
    R, B, n, nt, steps = 200, 5, 40, 10, 2000
    psi = rng.standard_normal(B * n)
    starts = np.arange(B, dtype=np.int64) * n
    sizes = np.full(B, n, dtype=np.int64)
    stp = np.full(B, steps, dtype=np.int64)
    offsets = np.arange(B, dtype=np.int64) * 3 * steps
    U = rng.random((R, B * 3 * steps))
    Z0 = np.zeros((R, B * n), dtype=np.int8)
    for b in range(B):
        Z0[:, b * n:b * n + nt] = 1
    out.append((f"swap_chains {R}x{B} blocks", "swap_chains",
                (Z0, psi, starts, sizes, stp, offsets, U)))

    X = np.column_stack([np.ones(100), rng.standard_normal((100, 39))])
    y = (rng.random(100) < 0.3).astype(np.float64)
    out.append(("irls_logistic 100x40", "irls_logistic", (X, y)))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if compiled is None:
        print("compiled backend not built; only the Python timings are shown")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<32}{'python [s]':>12}{'compiled [s]':>14}{'speedup':>10}")
    for label, name, argv in cases(rng):
        def call(mod):
            # swap_chains modifies its first argument
            a = (argv[0].copy(),) + argv[1:] if name == "swap_chains" else argv
            return getattr(mod, name)(*a)

        tp = _best(lambda: call(python), args.repeat)
        if compiled is None:
            print(f"{label:<32}{tp:>12.4f}{'-':>14}{'-':>10}")
            continue
        tc = _best(lambda: call(compiled), args.repeat)
        print(f"{label:<32}{tp:>12.4f}{tc:>14.5f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
