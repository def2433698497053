"""Time the compiled and numpy upward/downward kernels on random trees.

    python benchmarks/bench_kernels.py [--nodes 50] [--C 4] [--L 3] [--trees 200]
"""

import argparse
import timeit

import numpy as np

from htn import _backend
from htn.htmm import HtmmParameters, upward_downward, upward_log_likelihood
from htn.trees import LabeledTree, SkeletonSpec, sample_skeleton


def make_trees(n, nodes, L, V, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        kids = sample_skeleton(SkeletonSpec(nodes, nodes, L), rng)
        out.append(LabeledTree(rng.integers(0, V, len(kids)), kids))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--nodes", type=int, default=50)
    ap.add_argument("--C", type=int, default=4)
    ap.add_argument("--L", type=int, default=3)
    ap.add_argument("--V", type=int, default=10)
    ap.add_argument("--trees", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    params = HtmmParameters.random(args.C, args.L, args.V, np.random.default_rng(0), std=1.0)
    trees = make_trees(args.trees, args.nodes, args.L, args.V, 1)
    print(f"{args.trees} trees x {args.nodes} nodes, C={args.C} L={args.L} V={args.V}")

    results = {}
    for name in _backend.available():
        with _backend.use_backend(name):
            up = min(timeit.repeat(lambda: [upward_log_likelihood(params, t) for t in trees], number=1, repeat=args.repeat))
            both = min(timeit.repeat(lambda: [upward_downward(params, t) for t in trees], number=1, repeat=args.repeat))
        results[name] = (up, both)
        per = 1e6 / args.trees
        print(f"{name:>7}: upward {up * per:9.1f} us/tree   upward+downward {both * per:9.1f} us/tree")
    if len(results) == 2:
        (pu, pb), (cu, cb) = results["python"], results["cython"]
        print(f"speedup: upward {pu / cu:.1f}x, upward+downward {pb / cb:.1f}x")
    else:
        print("compiled kernels unavailable; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
