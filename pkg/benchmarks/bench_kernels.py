"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes mirror one training epoch on the 1000-row synthetic dataset.  Each
line also confirms the two backends agree bit for bit.
"""
import argparse
import timeit

import numpy as np

from relbridge.graph import SparseMatrix, gcn_normalize
from relbridge.kernels import implementations


def random_graph(rng, n, avg_degree):
    m = n * avg_degree // 2
    rows = rng.integers(0, n, m)
    cols = rng.integers(0, n, m)
    keep = rows != cols
    adj = SparseMatrix(n, n, np.r_[rows[keep], cols[keep]], np.r_[cols[keep], rows[keep]], merge="max")
    return gcn_normalize(adj)


def cases(rng):
    a_hat = random_graph(rng, 1200, 10)
    indptr, indices, values = a_hat.csr()
    return {
        "matmul 3000x16 @ 16x64": ("matmul", (rng.normal(size=(3000, 16)), rng.normal(size=(16, 64)))),
        "matmul 1000x96 @ 96x32": ("matmul", (rng.normal(size=(1000, 96)), rng.normal(size=(96, 32)))),
        "bmm 1000x(3x8 @ 8x3)": ("bmm", (rng.normal(size=(1000, 3, 8)), rng.normal(size=(1000, 8, 3)))),
        "spmm 1200 nodes x 32": ("spmm", (indptr, indices, values, rng.normal(size=(1200, 32)))),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    impls = implementations()
    if "cython" not in impls:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'case':<26}" + "".join(f"{name:>12}" for name in impls) + f"{'speedup':>10}  identical")
    for label, (fn, inputs) in cases(rng).items():
        times, results = {}, {}
        for name, mod in impls.items():
            f = getattr(mod, fn)
            results[name] = f(*inputs)
            times[name] = min(timeit.repeat(lambda: f(*inputs), number=1, repeat=args.repeat))
        row = f"{label:<26}" + "".join(f"{times[n] * 1e3:>10.2f}ms" for n in impls)
        if "cython" in impls:
            same = np.array_equal(results["numpy"], results["cython"])
            row += f"{times['numpy'] / times['cython']:>9.1f}x  {same}"
        print(row)


if __name__ == "__main__":
    main()
