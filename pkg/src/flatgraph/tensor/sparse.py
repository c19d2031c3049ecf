from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


@dataclass(eq=False)
class CsrMatrix:
    """Compressed sparse row matrix with sorted, unique column indices per row.

    Carries no gradient; in this library sparse matrices are always constants
    (adjacencies, propagation matrices, sparse input features).
    """

    num_rows: int
    num_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    _transpose: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.row_ptr = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.ascontiguousarray(self.col_idx, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.validate()

    def validate(self):
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.num_rows + 1,) or rp[0] != 0:
            raise ValueError("row_ptr must have num_rows+1 entries starting at 0")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if rp[-1] != len(ci) or len(ci) != len(self.values):
            raise ValueError("row_ptr[-1] must equal len(col_idx) == len(values)")
        if len(ci):
            if ci.min() < 0 or ci.max() >= self.num_cols:
                raise ValueError("column index out of range")
            # strictly increasing within a row: a non-increase is only allowed at row starts
            steps = np.diff(ci)
            starts = np.zeros(len(ci), dtype=bool)
            starts[rp[1:-1][rp[1:-1] < len(ci)]] = True
            if np.any((steps <= 0) & ~starts[1:]):
                raise ValueError("column indices must be strictly increasing within each row")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_rows, self.num_cols)

    @property
    def nnz(self) -> int:
        return len(self.col_idx)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_rows, dtype=np.int64), np.diff(self.row_ptr))

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> CsrMatrix:
        """Build from coordinates; duplicate entries are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        m, n = shape
        if len(rows) and (rows.min() < 0 or rows.max() >= m):
            raise ValueError("row index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows):
            keep = np.ones(len(rows), dtype=bool)
            keep[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            group = np.cumsum(keep) - 1
            vals = np.bincount(group, weights=vals)
            rows, cols = rows[keep], cols[keep]
        row_ptr = np.zeros(m + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=m), out=row_ptr[1:])
        return cls(m, n, row_ptr, cols, vals)

    @classmethod
    def from_dense(cls, dense) -> CsrMatrix:
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(dense)
        return cls.from_coo(rows, cols, dense[rows, cols], dense.shape)

    @classmethod
    def identity(cls, n: int) -> CsrMatrix:
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.col_idx] = self.values
        return out

    def to_scipy(self):
        import scipy.sparse as sp

        return sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape)

    @classmethod
    def from_scipy(cls, mat) -> CsrMatrix:
        mat = mat.tocsr()
        mat.sum_duplicates()
        mat.sort_indices()
        return cls(mat.shape[0], mat.shape[1], mat.indptr, mat.indices, mat.data)

    def transpose_structure(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(row_ptr, col_idx, perm) of the transpose; ``values[perm]`` are its values.

        Cached, since backward passes through the same matrix every epoch.
        """
        if self._transpose is None:
            rows = self.row_ids()
            perm = np.lexsort((rows, self.col_idx))
            t_ptr = np.zeros(self.num_cols + 1, dtype=np.int64)
            np.cumsum(np.bincount(self.col_idx, minlength=self.num_cols), out=t_ptr[1:])
            self._transpose = (t_ptr, np.ascontiguousarray(rows[perm]), perm)
        return self._transpose

    def transpose(self) -> CsrMatrix:
        t_ptr, t_idx, perm = self.transpose_structure()
        return CsrMatrix(self.num_cols, self.num_rows, t_ptr, t_idx, self.values[perm])

    def with_values(self, values) -> CsrMatrix:
        out = CsrMatrix.__new__(CsrMatrix)
        out.num_rows, out.num_cols = self.num_rows, self.num_cols
        out.row_ptr, out.col_idx = self.row_ptr, self.col_idx
        out.values = np.ascontiguousarray(values, dtype=np.float64)
        out._transpose = self._transpose
        return out

    def is_symmetric(self) -> bool:
        t = self.transpose()
        return (
            np.array_equal(t.row_ptr, self.row_ptr)
            and np.array_equal(t.col_idx, self.col_idx)
            and np.array_equal(t.values, self.values)
        )
