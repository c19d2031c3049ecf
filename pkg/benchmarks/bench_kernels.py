"""Time the compiled kernels against the numpy/scipy fallback on a random sparse graph.

    python benchmarks/bench_kernels.py --vertices 2708 --degree 4 --heads 8 --dim 8
"""
import argparse
import statistics
import timeit

import numpy as np
import scipy.sparse as sp

from flatgraph.tensor import _fallback

try:
    from flatgraph.tensor import _kernels
except ImportError:
    _kernels = None


def random_csr(n, degree, rng):
    m = sp.random(n, n, density=degree / n, format="csr", random_state=rng) + sp.identity(n, format="csr")
    m = m.tocsr()
    m.sort_indices()
    return m.indptr.astype(np.int64), m.indices.astype(np.int64), np.asarray(m.data, dtype=np.float64)


def cases(args):
    rng = np.random.default_rng(args.seed)
    n, k, d = args.vertices, args.heads, args.dim
    indptr, indices, data = random_csr(n, args.degree, rng)
    nnz = len(indices)
    dense = rng.normal(size=(n, args.features))
    src, dst = rng.normal(size=(n, k)), rng.normal(size=(n, k))
    e = rng.normal(size=(nnz, k))
    att = _fallback.edge_softmax(indptr, e)
    h, grad_out = rng.normal(size=(n, k, d)), rng.normal(size=(n, k, d))
    return nnz, {
        "csr_spmm": ("csr_spmm", (indptr, indices, data, dense, n)),
        "row_segment_sum": ("row_segment_sum", (indptr, e)),
        "edge_logits": ("edge_logits", (indptr, indices, src, dst)),
        "edge_softmax": ("edge_softmax", (indptr, e)),
        "edge_softmax_backward": ("edge_softmax_backward", (indptr, att, e)),
        "edge_aggregate": ("edge_aggregate", (indptr, indices, att, h)),
        "edge_aggregate_grad_att": ("edge_aggregate_grad_att", (indptr, indices, h, grad_out)),
    }


def best_of(fn, fargs, repeat, number):
    times = timeit.repeat(lambda: fn(*fargs), repeat=repeat, number=number)
    return min(times) / number, statistics.median(times) / number


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--vertices", type=int, default=2708)
    p.add_argument("--degree", type=float, default=4.0)
    p.add_argument("--features", type=int, default=64)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    nnz, table = cases(args)
    print(f"{args.vertices} vertices, {nnz} stored entries, {args.heads} heads x {args.dim} dims")
    print(f"{'kernel':<26}{'fallback ms':>12}{'cython ms':>12}{'speedup':>9}  max |diff|")
    for label, (name, fargs) in table.items():
        py, _ = best_of(getattr(_fallback, name), fargs, args.repeat, args.number)
        if _kernels is None:
            print(f"{label:<26}{1e3 * py:>12.3f}{'n/a':>12}")
            continue
        cy, _ = best_of(getattr(_kernels, name), fargs, args.repeat, args.number)
        diff = np.max(np.abs(getattr(_fallback, name)(*fargs) - getattr(_kernels, name)(*fargs)))
        print(f"{label:<26}{1e3 * py:>12.3f}{1e3 * cy:>12.3f}{py / cy:>8.2f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
