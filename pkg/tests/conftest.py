import itertools

import numpy as np
import pytest

from minignn.graph import GNNGraph, rand_graph


def dense_adjacency_loops(sources, targets, n, weights=None):
    """Brute-force A[t, s] += w for every edge, written with plain loops."""
    A = [[0.0] * n for _ in range(n)]
    for k, (s, t) in enumerate(zip(sources, targets)):
        A[int(t)][int(s)] += 1.0 if weights is None else float(weights[k])
    return np.array(A, dtype=np.float64).reshape(n, n)


def all_simple_digraphs(n):
    """Every directed graph on n nodes without loops or duplicate arcs."""
    arcs = [(s, t) for s in range(n) for t in range(n) if s != t]
    for mask in range(1 << len(arcs)):
        chosen = [arcs[i] for i in range(len(arcs)) if mask >> i & 1]
        yield GNNGraph([a for a, _ in chosen], [b for _, b in chosen], n)


def random_multigraph(rng, n_max=8, m_max=20, loops=True):
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(0, m_max + 1))
    src = rng.integers(0, n, size=m)
    dst = rng.integers(0, n, size=m)
    if not loops:
        keep = src != dst
        src, dst = src[keep], dst[keep]
    return GNNGraph(src, dst, n)


def permute_graph(g, perm):
    """Relabel node i as perm[i]; features move with their nodes."""
    inv = np.argsort(perm)
    ndata = {k: v.data[..., inv] for k, v in g.ndata.items()}
    return GNNGraph(perm[g.sources], perm[g.targets], g.num_nodes, ndata=ndata,
                    edge_weight=g.edge_weight)


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def p2():
    """Two nodes connected in both directions."""
    return GNNGraph([0, 1], [1, 0], 2)
