"""Graph container, adjacency construction and normalisation, subgraphs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import CsrMatrix

DENSE_POWER_LIMIT = 20_000
POWER_TRUNCATION = 1e-8


class IngestionError(ValueError):
    """Malformed or inconsistent graph data."""


@dataclass(eq=False)
class Graph:
    num_vertices: int
    features: np.ndarray
    labels: np.ndarray
    adj: CsrMatrix
    num_classes: int
    multilabel: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.shape[0] != self.num_vertices:
            raise IngestionError("feature rows do not match num_vertices")
        if self.adj.shape != (self.num_vertices, self.num_vertices):
            raise IngestionError("adjacency shape does not match num_vertices")
        if self.multilabel:
            self.labels = np.asarray(self.labels, dtype=np.int8)
            if self.labels.shape != (self.num_vertices, self.num_classes):
                raise IngestionError("multilabel matrix must be num_vertices x num_classes")
        else:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.num_vertices,):
                raise IngestionError("need one label per vertex")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise IngestionError("label index out of range")

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def edge_list(self) -> np.ndarray:
        return np.stack([self.adj.row_ids(), self.adj.col_idx], axis=1)

    def normalized_adjacency(self) -> NormalizedAdjacency:
        """Self-loop-augmented, symmetrically normalised adjacency (cached)."""
        if "norm" not in self._cache:
            edges = add_reverse_and_self_edges(self.edge_list(), self.num_vertices)
            a = CsrMatrix.from_coo(edges[:, 0], edges[:, 1], np.ones(len(edges)), self.adj.shape)
            self._cache["norm"] = NormalizedAdjacency(sym_normalize(a))
        return self._cache["norm"]

    def sparse_features(self, max_density: float = 0.1) -> CsrMatrix | None:
        """CSR copy of the features when they are sparse enough to pay off, else None."""
        if "xcsr" not in self._cache:
            density = np.count_nonzero(self.features) / max(self.features.size, 1)
            self._cache["xcsr"] = CsrMatrix.from_dense(self.features) if density <= max_density else None
        return self._cache["xcsr"]


class NormalizedAdjacency:
    """Normalised adjacency with lazily computed powers 1..4."""

    def __init__(self, base: CsrMatrix, dense_limit: int = DENSE_POWER_LIMIT, truncation: float = POWER_TRUNCATION):
        self.base = base
        self.dense_limit = dense_limit
        self.truncation = truncation
        self.powers: dict[int, np.ndarray | CsrMatrix] = {}

    def power(self, r: int):
        if r not in self.powers:
            self.powers[r] = adj_power(self.base, r, self.dense_limit, self.truncation)
        return self.powers[r]


def add_reverse_and_self_edges(edges, num_vertices: int) -> np.ndarray:
    """Symmetrise an edge list and add a self-loop per vertex; sorted, no duplicates."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) and (edges.min() < 0 or edges.max() >= num_vertices):
        raise IngestionError(f"edge endpoint outside [0, {num_vertices})")
    loops = np.arange(num_vertices, dtype=np.int64)
    src = np.concatenate([edges[:, 0], edges[:, 1], loops])
    dst = np.concatenate([edges[:, 1], edges[:, 0], loops])
    pairs = np.unique(np.stack([src, dst], axis=1), axis=0)
    return pairs


def sym_normalize(adj: CsrMatrix) -> CsrMatrix:
    """D^-1/2 A D^-1/2 with D the row sums of A."""
    rows = adj.row_ids()
    deg = np.bincount(rows, weights=adj.values, minlength=adj.num_rows)
    if np.any(deg <= 0):
        raise ValueError("sym_normalize: every vertex needs positive degree (add self-loops first)")
    inv_sqrt = 1.0 / np.sqrt(deg)
    # product of the two scales first: commutative, so (i,j) and (j,i) match bit for bit
    return adj.with_values(adj.values * (inv_sqrt[rows] * inv_sqrt[adj.col_idx]))


def adj_power(norm: CsrMatrix, r: int, dense_limit: int = DENSE_POWER_LIMIT, truncation: float = POWER_TRUNCATION):
    """r-fold product of ``norm`` with itself.

    Dense ndarray when the matrix has at most ``dense_limit`` rows, otherwise
    CSR with entries below ``truncation`` dropped after each product.
    """
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= 4:
        raise ValueError(f"adjacency power must be in 1..4, got {r!r}")
    if norm.num_rows != norm.num_cols:
        raise ValueError("adj_power needs a square matrix")
    if norm.num_rows <= dense_limit:
        base = norm.to_dense()
        out = base
        for _ in range(r - 1):
            out = norm.to_scipy() @ out
        return np.ascontiguousarray(out)
    base = norm.to_scipy()
    out = base.copy()
    for _ in range(r - 1):
        out = (out @ base).tocsr()
        out.data[out.data < truncation] = 0.0
        out.eliminate_zeros()
    return CsrMatrix.from_scipy(out)


def induced_subgraph(g: Graph, keep) -> tuple[Graph, np.ndarray]:
    """Subgraph on ``keep`` (renumbered in sorted order) and the old ids of its vertices."""
    keep = np.unique(np.asarray(keep, dtype=np.int64))
    if keep.size == 0:
        raise ValueError("induced_subgraph: empty vertex set")
    new_id = np.full(g.num_vertices, -1, dtype=np.int64)
    new_id[keep] = np.arange(len(keep))
    rows, cols = g.adj.row_ids(), g.adj.col_idx
    sel = (new_id[rows] >= 0) & (new_id[cols] >= 0)
    adj = CsrMatrix.from_coo(new_id[rows[sel]], new_id[cols[sel]], g.adj.values[sel], (len(keep), len(keep)))
    sub = Graph(
        num_vertices=len(keep),
        features=g.features[keep],
        labels=g.labels[keep],
        adj=adj,
        num_classes=g.num_classes,
        multilabel=g.multilabel,
    )
    return sub, keep


def batch_adjacency(power, batch) -> np.ndarray:
    """Dense |B| x |B| block of an adjacency power restricted to ``batch``."""
    batch = np.asarray(batch, dtype=np.int64)
    if len(np.unique(batch)) != len(batch):
        raise ValueError("batch_adjacency: duplicate vertex in batch")
    if isinstance(power, CsrMatrix):
        return power.to_scipy()[batch][:, batch].toarray()
    if len(batch) == power.shape[0] and np.array_equal(batch, np.arange(len(batch))):
        return power
    return power[np.ix_(batch, batch)]
