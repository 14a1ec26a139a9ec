"""Pure-numpy kernels.

Every kernel here fixes its floating-point reduction order so that an output
row depends only on the data that feeds it, never on where that row sits in
the array.  The compiled twin in ``_ckernels.pyx`` follows the same order and
produces bit-identical results.
"""
import numpy as np


def matmul(a, b):
    """Row-stable ``a @ b`` for 2-D float64 arrays.

    Each output entry is accumulated over the inner index in increasing order,
    starting from 0.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, k = a.shape
    if b.shape[0] != k:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    out = np.zeros((n, b.shape[1]))
    for p in range(k):
        out += a[:, p : p + 1] * b[p]
    return out


def bmm(a, b):
    """Batched row-stable matmul, ``(B, n, k) @ (B, k, m) -> (B, n, m)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    nb, n, k = a.shape
    if b.shape[0] != nb or b.shape[1] != k:
        raise ValueError(f"batched extents differ: {a.shape} @ {b.shape}")
    out = np.zeros((nb, n, b.shape[2]))
    for p in range(k):
        out += a[:, :, p : p + 1] * b[:, p : p + 1, :]
    return out


def _term_order(rows, data, gathered):
    """Sort nonzeros by (row, value, neighbor feature row) lexicographically.

    Terms that tie on the full key are identical, so their relative order
    cannot change a sum.
    """
    d = gathered.shape[1]
    if d == 0:
        return np.lexsort((data, rows))
    order = np.lexsort((gathered[:, 0], data, rows))
    if d > 1:
        r, v, x0 = rows[order], data[order], gathered[order, 0]
        ties = (r[1:] == r[:-1]) & (v[1:] == v[:-1]) & (x0[1:] == x0[:-1])
        if ties.any():
            keys = [gathered[:, j] for j in range(d - 1, -1, -1)]
            order = np.lexsort(keys + [data, rows])
    return order


def spmm(indptr, indices, data, x):
    """CSR times dense with a permutation-invariant summation order.

    Row ``i`` of the result sums ``data[t] * x[indices[t]]`` over its nonzeros
    in ascending order of ``(data[t], x[indices[t], 0], x[indices[t], 1], ...)``.
    Relabeling nodes therefore permutes the output exactly.
    """
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    data = np.asarray(data, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n_rows = indptr.shape[0] - 1
    out = np.zeros((n_rows, x.shape[1]))
    nnz = indices.shape[0]
    if nnz == 0:
        return out
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(n_rows, dtype=np.int64), counts)
    gathered = x[indices]
    order = _term_order(rows, data, gathered)
    # rows is the primary key, so the sorted row array equals ``rows``
    pos = np.arange(nnz, dtype=np.int64) - indptr[rows]
    by_pos = np.argsort(pos, kind="stable")
    bounds = np.searchsorted(pos[by_pos], np.arange(counts.max() + 1))
    for t in range(counts.max()):
        sel = order[by_pos[bounds[t] : bounds[t + 1]]]
        out[rows[sel]] += data[sel, None] * gathered[sel]
    return out
