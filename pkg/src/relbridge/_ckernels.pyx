# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels.  Same reduction order as ``_fallback``; results are bit-identical."""
import numpy as np

from libc.stdlib cimport free, malloc


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    if b.shape[0] != k:
        raise ValueError(f"inner extents differ: ({n}, {k}) @ ({b.shape[0]}, {m})")
    out = np.zeros((n, m))
    cdef double[:, ::1] o = out
    if n and k and m:
        with nogil:
            _gemm(&a[0, 0], &b[0, 0], &o[0, 0], n, k, m)
    return out


cdef void _gemm(const double* a, const double* b, double* o,
                Py_ssize_t n, Py_ssize_t k, Py_ssize_t m) noexcept nogil:
    cdef Py_ssize_t i, p, j
    cdef double aip
    cdef double* orow
    cdef const double* brow
    for i in range(n):
        orow = o + i * m
        for p in range(k):
            aip = a[i * k + p]
            brow = b + p * m
            for j in range(m):
                orow[j] = orow[j] + aip * brow[j]


def bmm(const double[:, :, ::1] a, const double[:, :, ::1] b):
    cdef Py_ssize_t nb = a.shape[0], n = a.shape[1], k = a.shape[2], m = b.shape[2]
    cdef Py_ssize_t s
    if b.shape[0] != nb or b.shape[1] != k:
        raise ValueError(f"batched extents differ: ({nb}, {n}, {k}) @ ({b.shape[0]}, {b.shape[1]}, {m})")
    out = np.zeros((nb, n, m))
    cdef double[:, :, ::1] o = out
    if nb and n and k and m:
        with nogil:
            for s in range(nb):
                _gemm(&a[s, 0, 0], &b[s, 0, 0], &o[s, 0, 0], n, k, m)
    return out


cdef inline int _cmp(Py_ssize_t t1, Py_ssize_t t2, const double[::1] data,
                     const long long[::1] indices, const double[:, ::1] x) noexcept nogil:
    cdef Py_ssize_t k, d = x.shape[1]
    cdef double u, v
    u = data[t1]
    v = data[t2]
    if u < v:
        return -1
    if u > v:
        return 1
    for k in range(d):
        u = x[indices[t1], k]
        v = x[indices[t2], k]
        if u < v:
            return -1
        if u > v:
            return 1
    return 0


cdef void _sort(Py_ssize_t* buf, Py_ssize_t* tmp, Py_ssize_t n, const double[::1] data,
                const long long[::1] indices, const double[:, ::1] x) noexcept nogil:
    # insertion sort for short runs, then bottom-up merges
    cdef Py_ssize_t run = 16, lo, hi, i, j, key, width, mid, a, b, c
    cdef Py_ssize_t* src = buf
    cdef Py_ssize_t* dst = tmp
    cdef Py_ssize_t* swap
    lo = 0
    while lo < n:
        hi = lo + run if lo + run < n else n
        for i in range(lo + 1, hi):
            key = src[i]
            j = i - 1
            while j >= lo and _cmp(src[j], key, data, indices, x) > 0:
                src[j + 1] = src[j]
                j -= 1
            src[j + 1] = key
        lo = hi
    width = run
    while width < n:
        lo = 0
        while lo < n:
            mid = lo + width if lo + width < n else n
            hi = lo + 2 * width if lo + 2 * width < n else n
            a = lo
            b = mid
            c = lo
            while a < mid and b < hi:
                if _cmp(src[b], src[a], data, indices, x) < 0:
                    dst[c] = src[b]
                    b += 1
                else:
                    dst[c] = src[a]
                    a += 1
                c += 1
            while a < mid:
                dst[c] = src[a]
                a += 1
                c += 1
            while b < hi:
                dst[c] = src[b]
                b += 1
                c += 1
            lo = hi
        swap = src
        src = dst
        dst = swap
        width *= 2
    if src != buf:
        for i in range(n):
            buf[i] = src[i]


def spmm(const long long[::1] indptr, const long long[::1] indices, const double[::1] data,
         const double[:, ::1] x):
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1, d = x.shape[1]
    cdef Py_ssize_t i, t, s, k, deg, maxdeg = 0, start, col
    cdef double v
    out = np.zeros((n_rows, d))
    cdef double[:, ::1] o = out
    for i in range(n_rows):
        deg = indptr[i + 1] - indptr[i]
        if deg > maxdeg:
            maxdeg = deg
    if maxdeg == 0:
        return out
    cdef Py_ssize_t* buf = <Py_ssize_t*> malloc(maxdeg * sizeof(Py_ssize_t))
    cdef Py_ssize_t* tmp = <Py_ssize_t*> malloc(maxdeg * sizeof(Py_ssize_t))
    if buf == NULL or tmp == NULL:
        free(buf)
        free(tmp)
        raise MemoryError()
    try:
        with nogil:
            for i in range(n_rows):
                start = indptr[i]
                deg = indptr[i + 1] - start
                for t in range(deg):
                    buf[t] = start + t
                _sort(buf, tmp, deg, data, indices, x)
                for s in range(deg):
                    t = buf[s]
                    v = data[t]
                    col = indices[t]
                    for k in range(d):
                        o[i, k] = o[i, k] + v * x[col, k]
    finally:
        free(buf)
        free(tmp)
    return out
