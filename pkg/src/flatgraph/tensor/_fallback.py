"""Pure numpy/scipy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and results match the compiled module; only summation order (and
hence the last few bits) may differ.
"""
import numpy as np
import scipy.sparse as sp


def _row_ids(indptr):
    return np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))


def _segment_reduce(ufunc, indptr, values, empty_value=0.0):
    """``ufunc.reduceat`` over CSR rows, with empty rows set to ``empty_value``."""
    nrows = len(indptr) - 1
    out = np.full((nrows,) + values.shape[1:], empty_value, dtype=np.float64)
    nonempty = np.flatnonzero(np.diff(indptr) > 0)
    if len(nonempty):
        out[nonempty] = ufunc.reduceat(values, indptr[nonempty], axis=0)
    return out


def csr_spmm(indptr, indices, data, dense, nrows):
    mat = sp.csr_matrix((data, indices, indptr), shape=(nrows, dense.shape[0]))
    return np.ascontiguousarray(mat @ dense)


def row_segment_sum(indptr, values):
    return _segment_reduce(np.add, indptr, values)


def edge_logits(indptr, indices, src, dst):
    return src[_row_ids(indptr)] + dst[indices]


def edge_softmax(indptr, e):
    rows = _row_ids(indptr)
    row_max = _segment_reduce(np.maximum, indptr, e)
    ex = np.exp(e - row_max[rows])
    return ex / _segment_reduce(np.add, indptr, ex)[rows]


def edge_softmax_backward(indptr, att, grad):
    dot = _segment_reduce(np.add, indptr, att * grad)
    return att * (grad - dot[_row_ids(indptr)])


def edge_aggregate(indptr, indices, att, h):
    nrows = len(indptr) - 1
    out = np.empty((nrows,) + h.shape[1:], dtype=np.float64)
    for k in range(h.shape[1]):
        mat = sp.csr_matrix((att[:, k], indices, indptr), shape=(nrows, h.shape[0]))
        out[:, k, :] = mat @ h[:, k, :]
    return out


def edge_aggregate_grad_att(indptr, indices, h, grad_out):
    return np.einsum("pkd,pkd->pk", grad_out[_row_ids(indptr)], h[indices])
