"""CSR against dense matmul over a grid of layer sizes and sparsities.

    python scripts/bench_sparse.py --sizes 64 128 256 --ratios 0.9 0.95 0.99
"""
import argparse

import numpy as np

from issp.pruning import pruned_count
from issp.sparse import bench_matmul, dense_to_csr
from issp.tensor import tune_malloc


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", nargs="+", type=int, default=[64, 128, 256, 512])
    ap.add_argument("--ratios", nargs="+", type=float, default=[0.9, 0.95, 0.99])
    ap.add_argument("--reps", type=int, default=9)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    tune_malloc()
    g = np.random.default_rng(args.seed)
    print(f"{'n':>5}{'r':>6}{'dense us':>11}{'csr us':>10}{'speedup':>9}")
    for n in args.sizes:
        b = g.standard_normal((n, n)).astype(np.float32)
        for r in args.ratios:
            w = g.standard_normal((n, n)).astype(np.float32)
            w.reshape(-1)[g.permutation(n * n)[: pruned_count(n * n, r)]] = 0
            rep = bench_matmul(dense_to_csr(w), b, args.reps)
            print(f"{n:>5}{r:>6}{rep.dense_ns / 1e3:>11.1f}{rep.sparse_ns / 1e3:>10.1f}{rep.speedup:>9.2f}")


if __name__ == "__main__":
    main()
