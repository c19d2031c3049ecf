# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sparse kernels.

All routines walk a CSR structure row by row in a fixed order, so results are
bit-reproducible. Index arrays are int64, values float64, dense operands
C-contiguous.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

ctypedef cnp.int64_t idx_t


def csr_spmm(const idx_t[::1] indptr, const idx_t[::1] indices,
             const double[::1] data, const double[:, ::1] dense,
             Py_ssize_t nrows):
    cdef Py_ssize_t n = dense.shape[1]
    out_arr = np.zeros((nrows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, j, c
    cdef double v
    with nogil:
        for i in range(nrows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                v = data[p]
                for c in range(n):
                    out[i, c] += v * dense[j, c]
    return out_arr


def row_segment_sum(const idx_t[::1] indptr, const double[:, ::1] values):
    """Sum the per-edge rows of ``values`` belonging to each CSR row."""
    cdef Py_ssize_t nrows = indptr.shape[0] - 1
    cdef Py_ssize_t k = values.shape[1]
    out_arr = np.zeros((nrows, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, h
    with nogil:
        for i in range(nrows):
            for p in range(indptr[i], indptr[i + 1]):
                for h in range(k):
                    out[i, h] += values[p, h]
    return out_arr


def edge_logits(const idx_t[::1] indptr, const idx_t[::1] indices,
                const double[:, ::1] src, const double[:, ::1] dst):
    """e[p, h] = src[row(p), h] + dst[col(p), h]."""
    cdef Py_ssize_t nrows = indptr.shape[0] - 1
    cdef Py_ssize_t k = src.shape[1]
    out_arr = np.empty((indices.shape[0], k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, h, j
    with nogil:
        for i in range(nrows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                for h in range(k):
                    out[p, h] = src[i, h] + dst[j, h]
    return out_arr


def edge_softmax(const idx_t[::1] indptr, const double[:, ::1] e):
    """Softmax of edge scores over each row's edges, per head."""
    cdef Py_ssize_t nrows = indptr.shape[0] - 1
    cdef Py_ssize_t k = e.shape[1]
    out_arr = np.empty((e.shape[0], k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, h, start, stop
    cdef double m, s
    with nogil:
        for i in range(nrows):
            start = indptr[i]
            stop = indptr[i + 1]
            if start == stop:
                continue
            for h in range(k):
                m = e[start, h]
                for p in range(start + 1, stop):
                    if e[p, h] > m:
                        m = e[p, h]
                s = 0.0
                for p in range(start, stop):
                    out[p, h] = exp(e[p, h] - m)
                    s += out[p, h]
                for p in range(start, stop):
                    out[p, h] /= s
    return out_arr


def edge_softmax_backward(const idx_t[::1] indptr, const double[:, ::1] att,
                          const double[:, ::1] grad):
    cdef Py_ssize_t nrows = indptr.shape[0] - 1
    cdef Py_ssize_t k = att.shape[1]
    out_arr = np.empty((att.shape[0], k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, h
    cdef double dot
    with nogil:
        for i in range(nrows):
            for h in range(k):
                dot = 0.0
                for p in range(indptr[i], indptr[i + 1]):
                    dot += att[p, h] * grad[p, h]
                for p in range(indptr[i], indptr[i + 1]):
                    out[p, h] = att[p, h] * (grad[p, h] - dot)
    return out_arr


def edge_aggregate(const idx_t[::1] indptr, const idx_t[::1] indices,
                   const double[:, ::1] att, const double[:, :, ::1] h):
    """out[i, k, :] = sum_p att[p, k] * h[col(p), k, :] over row i's edges."""
    cdef Py_ssize_t nrows = indptr.shape[0] - 1
    cdef Py_ssize_t nh = h.shape[1]
    cdef Py_ssize_t d = h.shape[2]
    out_arr = np.zeros((nrows, nh, d), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, p, j, k, c
    cdef double w
    with nogil:
        for i in range(nrows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                for k in range(nh):
                    w = att[p, k]
                    for c in range(d):
                        out[i, k, c] += w * h[j, k, c]
    return out_arr


def edge_aggregate_grad_att(const idx_t[::1] indptr, const idx_t[::1] indices,
                            const double[:, :, ::1] h, const double[:, :, ::1] grad_out):
    """grad_att[p, k] = <grad_out[row(p), k, :], h[col(p), k, :]>."""
    cdef Py_ssize_t nrows = indptr.shape[0] - 1
    cdef Py_ssize_t nh = h.shape[1]
    cdef Py_ssize_t d = h.shape[2]
    out_arr = np.empty((indices.shape[0], nh), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, j, k, c
    cdef double s
    with nogil:
        for i in range(nrows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                for k in range(nh):
                    s = 0.0
                    for c in range(d):
                        s += grad_out[i, k, c] * h[j, k, c]
                    out[p, k] = s
    return out_arr
