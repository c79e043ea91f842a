"""Time the ball-tree radius-count kernel: compiled extension vs pure Python.

    python benchmarks/bench_balltree.py --n 4000 --dim 1 --eps 0.5 1.0 --repeat 3

Counts every training point's epsilon-ball (the workload of a UTVAE
weighting pass), checks both backends agree, and prints one row per
(epsilon, backend) with the best wall time over ``--repeat`` runs.
"""

import argparse
import time

import numpy as np

from utvae.kernels import compiled_backend
from utvae.propensity import build_index


def best_time(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--eps", type=float, nargs="+", default=[0.5, 1.0, 1.5, 2.0])
    p.add_argument("--leaf-size", type=int, default=40)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    X = rng.standard_normal((args.n, args.dim))
    labels = rng.integers(0, 2, args.n)
    t0 = time.perf_counter()
    index = build_index(X, leaf_size=args.leaf_size)
    print(f"build: n={args.n} dim={args.dim} nodes={index.n_nodes} {time.perf_counter() - t0:.3f}s")

    backends = ["python"] + (["compiled"] if compiled_backend is not None else [])
    if len(backends) == 1:
        print("compiled extension not built; timing the Python backend only")
    print(f"{'eps':>6} {'backend':>9} {'seconds':>9} {'speedup':>8} {'mean ball':>10}")
    for eps in args.eps:
        times = {}
        results = {}
        for b in backends:
            times[b], results[b] = best_time(lambda: index.radius_count(X, labels, eps, backend=b), args.repeat)
        if len(backends) == 2:
            for a, c in zip(results["python"], results["compiled"]):
                assert np.array_equal(a, c), "backends disagree"
        for b in backends:
            print(f"{eps:6.2f} {b:>9} {times[b]:9.4f} {times['python'] / times[b]:7.1f}x "
                  f"{results[b][1].mean():10.1f}")


if __name__ == "__main__":
    main()
