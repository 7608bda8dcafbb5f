"""Compiled vs numpy kernels on problem sizes met during training.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints the best-of-N wall time per kernel and backend, the speedup, and
checks that both backends agree on every problem. The package dispatches
``nearest`` to the compiled loop and the two dense contractions to numpy's
batched matmul, following these numbers.
"""
import argparse
import timeit

import numpy as np

from cafield import kernels

PROBLEMS = {
    # (targets, neighbors, kernel columns, sources, feature width)
    "aggregate level1 16^3": (512, 512, 27, 2000, 8),
    "aggregate level2 32^3": (1000, 512, 48, 4000, 16),
}


def _agg_problem(rng, T, k, q, n, f):
    return rng.normal(size=(T, k, q)), rng.integers(n, size=(T, k)), rng.normal(size=(n, f)), n


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    rows = []

    for n_a, n_b in ((512, 512), (2048, 2048)):
        A, B = rng.normal(size=(n_a, 3)), rng.normal(size=(n_b, 3))
        outs = {name: m.nearest_sqdist(A, B) for name, m in impls.items()}
        same = all(np.array_equal(o[1], outs["python"][1]) for o in outs.values())
        times = {name: best(lambda m=m: m.nearest_sqdist(A, B), args.repeat)
                 for name, m in impls.items()}
        rows.append((f"nearest {n_a}x{n_b}", times, same))

    for label, shape in PROBLEMS.items():
        K, idx, S, n = _agg_problem(rng, *shape)
        G = rng.normal(size=(shape[0], shape[2], shape[4]))
        ref_a = impls["python"].aggregate(K, idx, S)
        ref_s = impls["python"].scatter(K, idx, G, n)
        same_a = all(np.allclose(m.aggregate(K, idx, S), ref_a, atol=1e-10) for m in impls.values())
        same_s = all(np.allclose(m.scatter(K, idx, G, n), ref_s, atol=1e-10) for m in impls.values())
        rows.append((label, {name: best(lambda m=m: m.aggregate(K, idx, S), args.repeat)
                             for name, m in impls.items()}, same_a))
        rows.append((label.replace("aggregate", "scatter"),
                     {name: best(lambda m=m: m.scatter(K, idx, G, n), args.repeat)
                      for name, m in impls.items()}, same_s))

    print(f"{'kernel':<26}{'python ms':>11}{'cython ms':>11}{'speedup':>9}  agree")
    for label, times, same in rows:
        py = times["python"] * 1e3
        cy = times.get("cython")
        cy_s = f"{cy * 1e3:>11.2f}" if cy else f"{'-':>11}"
        sp = f"{times['python'] / cy:>8.1f}x" if cy else f"{'-':>9}"
        print(f"{label:<26}{py:>11.2f}{cy_s}{sp}  {'yes' if same else 'NO'}")


if __name__ == "__main__":
    main()
