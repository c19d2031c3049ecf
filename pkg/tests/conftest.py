import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flatgraph.graph import Graph, add_reverse_and_self_edges
from flatgraph.tensor import CsrMatrix

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=400, deadline=None)
settings.load_profile("default")


def random_graph(n, num_features=5, num_classes=3, p_edge=0.4, seed=0, dense_features=True):
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p_edge]
    sym = add_reverse_and_self_edges(np.array(pairs, dtype=np.int64).reshape(-1, 2), n)
    sym = sym[sym[:, 0] != sym[:, 1]]
    adj = CsrMatrix.from_coo(sym[:, 0], sym[:, 1], np.ones(len(sym)), (n, n))
    if dense_features:
        x = rng.normal(size=(n, num_features))
    else:
        x = (rng.random((n, num_features)) < 0.3).astype(float)
    labels = rng.integers(0, num_classes, n)
    return Graph(n, x, labels, adj, num_classes)


@pytest.fixture
def small_graph():
    return random_graph(6, seed=3)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS):
            terminalreporter.write_line(line)
