import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_graph
from flatgraph.graph import (
    Graph,
    IngestionError,
    add_reverse_and_self_edges,
    adj_power,
    batch_adjacency,
    induced_subgraph,
    sym_normalize,
)
from flatgraph.tensor import CsrMatrix


def with_loops(edges, n):
    e = add_reverse_and_self_edges(edges, n)
    return CsrMatrix.from_coo(e[:, 0], e[:, 1], np.ones(len(e)), (n, n))


def test_add_reverse_and_self_edges_examples():
    expect = [[0, 0], [0, 1], [1, 0], [1, 1]]
    assert add_reverse_and_self_edges([(0, 1)], 2).tolist() == expect
    assert add_reverse_and_self_edges(np.zeros((0, 2)), 1).tolist() == [[0, 0]]
    assert add_reverse_and_self_edges([(0, 1), (1, 0), (0, 1)], 2).tolist() == expect


def test_add_reverse_rejects_out_of_range():
    with pytest.raises(IngestionError):
        add_reverse_and_self_edges([(0, 2)], 2)


@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), max_size=25))
def test_add_reverse_output_is_exact_symmetric_closure(edges):
    out = add_reverse_and_self_edges(np.array(edges, dtype=np.int64).reshape(-1, 2), 8)
    got = set(map(tuple, out.tolist()))
    want = {(a, b) for a, b in edges} | {(b, a) for a, b in edges} | {(i, i) for i in range(8)}
    assert got == want
    assert out.tolist() == [list(e) for e in sorted(got)]


def test_sym_normalize_examples():
    assert np.allclose(sym_normalize(with_loops([(0, 1)], 2)).to_dense(), 0.5, rtol=0, atol=1e-15)
    assert sym_normalize(with_loops(np.zeros((0, 2)), 1)).to_dense()[0, 0] == 1.0
    path = sym_normalize(with_loops([(0, 1), (1, 2)], 3)).to_dense()
    assert abs(path[0, 1] - 1 / np.sqrt(6)) < 1e-15


def test_sym_normalize_needs_positive_degree():
    with pytest.raises(ValueError):
        sym_normalize(CsrMatrix.from_coo([0], [0], [1.0], (2, 2)))


@given(st.integers(1, 12), st.integers(0, 10_000))
def test_normalized_adjacency_symmetric_and_spectrally_bounded(n, seed):
    g = random_graph(n, seed=seed)
    a = g.normalized_adjacency().base.to_dense()
    assert np.array_equal(a, a.T)
    assert np.all(a >= 0)
    # power iteration on the symmetric matrix
    v = np.random.default_rng(seed).random(n) + 0.1
    for _ in range(200):
        w = a @ v
        v = w / np.linalg.norm(w)
    assert abs(v @ a @ v) <= 1 + 1e-9
    assert np.max(np.abs(np.linalg.eigvalsh(a))) <= 1 + 1e-9


def test_adj_power_examples():
    half = CsrMatrix.from_dense(np.full((2, 2), 0.5))
    assert np.array_equal(adj_power(half, 1), half.to_dense())
    assert np.allclose(adj_power(half, 2), np.full((2, 2), 0.5), atol=0, rtol=1e-15)
    rng = np.random.default_rng(0)
    m = rng.random((4, 4))
    dense = m @ m.T / 8
    assert np.max(np.abs(adj_power(CsrMatrix.from_dense(dense), 3) - dense @ dense @ dense)) < 1e-10
    with pytest.raises(ValueError):
        adj_power(half, 5)
    with pytest.raises(ValueError):
        adj_power(half, 0)


def test_sparse_powers_match_dense_on_sampled_entries():
    g = random_graph(30, p_edge=0.1, seed=2)
    base = g.normalized_adjacency().base
    for r in (2, 3, 4):
        dense = adj_power(base, r)
        sparse = adj_power(base, r, dense_limit=0, truncation=0.0)
        assert isinstance(sparse, CsrMatrix)
        assert np.max(np.abs(sparse.to_dense() - dense)) < 1e-10
        assert np.all(dense >= 0)


def test_induced_subgraph_examples():
    g = random_graph(5, seed=1)
    sub, kept = induced_subgraph(g, np.arange(5))
    assert np.array_equal(kept, np.arange(5))
    assert np.array_equal(sub.adj.to_dense(), g.adj.to_dense())
    tri = Graph(3, np.eye(3), [0, 1, 0], with_loops([(0, 1), (1, 2), (0, 2)], 3), 2)
    sub, _ = induced_subgraph(tri, [0, 1])
    off = sub.adj.to_dense() - np.diag(np.diag(sub.adj.to_dense()))
    assert sub.num_vertices == 2 and off.sum() == 2
    with pytest.raises(ValueError):
        induced_subgraph(g, [])


@given(st.integers(2, 15), st.integers(0, 10_000), st.data())
def test_induced_subgraph_matches_brute_force_filter(n, seed, data):
    g = random_graph(n, seed=seed)
    keep = sorted(data.draw(st.sets(st.integers(0, n - 1), min_size=1)))
    sub, kept = induced_subgraph(g, keep)
    pos = {v: i for i, v in enumerate(kept)}
    brute = {(pos[a], pos[b]) for a, b in g.edge_list().tolist() if a in pos and b in pos}
    assert set(map(tuple, sub.edge_list().tolist())) == brute
    assert np.array_equal(sub.features, g.features[keep])
    assert np.array_equal(sub.labels, g.labels[keep])


def test_batch_adjacency_examples():
    g = random_graph(10, seed=4)
    p = g.normalized_adjacency().power(2)
    assert np.array_equal(batch_adjacency(p, np.arange(10)), p)
    assert batch_adjacency(p, [3]).tolist() == [[p[3, 3]]]
    batch = np.random.default_rng(0).choice(10, 5, replace=False)
    naive = np.array([[p[i, j] for j in batch] for i in batch])
    assert np.array_equal(batch_adjacency(p, batch), naive)
    sparse = CsrMatrix.from_dense(p)
    assert np.array_equal(batch_adjacency(sparse, batch), naive)
    with pytest.raises(ValueError):
        batch_adjacency(p, [1, 1])


def test_graph_validates_labels_and_shapes():
    adj = with_loops([], 2)
    with pytest.raises(IngestionError):
        Graph(2, np.zeros((2, 1)), [0, 2], adj, 2)
    with pytest.raises(IngestionError):
        Graph(3, np.zeros((2, 1)), [0, 1], adj, 2)
