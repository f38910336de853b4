import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import minignn.message_passing as mp
import minignn.tensor as T
from minignn.errors import ContractError, DimensionError
from minignn.graph import GNNGraph, rand_graph
from minignn.message_passing import (
    aggregate_neighbors,
    aggregation,
    apply_edges,
    copy_xj,
    e_mul_xj,
    edge_softmax,
    fusion_path,
    message,
    propagate,
    spmm_csr,
    w_mul_xj,
)
from minignn.tensor import Tape, Tensor, backward, finite_diff_gradient

from conftest import all_simple_digraphs, dense_adjacency_loops, permute_graph, random_multigraph


def rel(a, b):
    return np.abs(a - b).max(initial=0.0) / max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-3)


def weighted_graph(rng, n_max=50, m_max=200):
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(0, m_max + 1))
    return GNNGraph(rng.integers(0, n, m), rng.integers(0, n, m), n, edge_weight=rng.random(m) + 0.1)


def loop_aggregate(g, m, op):
    """Per-node reduction with explicit loops, the reference for aggregate_neighbors."""
    d, n = m.shape[0], g.num_nodes
    out = np.zeros((d, n))
    for t in range(n):
        cols = [e for e in range(g.num_edges) if g.targets[e] == t]
        if not cols:
            continue
        block = m[:, cols]
        out[:, t] = {"sum": block.sum(1), "mean": block.mean(1), "max": block.max(1)}[op]
    return out


# --- apply_edges --------------------------------------------------------------


def test_apply_edges_examples(p2):
    x = Tensor([[5.0, 7]])
    assert apply_edges(copy_xj, p2, xj=x).data.tolist() == [[5, 7]]
    g = GNNGraph([0, 1], [0, 1], 2)
    assert apply_edges(copy_xj, g, xj=x).data.tolist() == [[5, 7]]
    assert apply_edges(e_mul_xj, g, xj=x, e=Tensor([[2.0, 3]])).data.tolist() == [[10, 21]]
    assert apply_edges(copy_xj, GNNGraph([], [], 3), xj=Tensor(np.ones((4, 3)))).shape == (4, 0)


def test_apply_edges_missing_argument():
    g = GNNGraph([0], [1], 2)
    with pytest.raises(ContractError):
        apply_edges(copy_xj, g)
    with pytest.raises(ContractError):
        apply_edges(e_mul_xj, g, xj=Tensor(np.ones((1, 2))))
    with pytest.raises(ContractError):
        apply_edges(w_mul_xj, g, xj=Tensor(np.ones((1, 2))))
    with pytest.raises(ContractError):
        apply_edges(message(lambda xi, xj, e: xi, requires=("xi",)), g, xj=Tensor(np.ones((1, 2))))
    with pytest.raises(DimensionError):
        apply_edges(copy_xj, g, xj=Tensor(np.ones((1, 3))))


def test_apply_edges_custom_sees_target_and_source():
    g = GNNGraph([0, 2], [1, 1], 3)
    x = Tensor([[1.0, 10, 100]])
    out = apply_edges(message(lambda xi, xj, e: T.sub(xi, xj)), g, xi=x, xj=x)
    assert out.data.tolist() == [[9, -90]]


def test_message_kind_contract():
    with pytest.raises(ContractError):
        mp.MessageFunction("custom")
    with pytest.raises(ContractError):
        mp.MessageFunction("copy_xj", fn=lambda *a: None)
    with pytest.raises(ContractError):
        aggregation("median")
    assert aggregation("+") == "sum" and aggregation(np.mean) == "mean"


# --- aggregate_neighbors --------------------------------------------------------------


def test_aggregate_examples():
    g = GNNGraph([0, 2], [1, 1], 3)
    m = Tensor([[1.0, 2]])
    assert aggregate_neighbors(g, "sum", m).data.tolist() == [[0, 3, 0]]
    assert aggregate_neighbors(g, "mean", m).data.tolist() == [[0, 1.5, 0]]
    assert aggregate_neighbors(g, "max", m).data.tolist() == [[0, 2, 0]]
    neg = Tensor([[-1.0, -2]])
    assert aggregate_neighbors(g, "max", neg).data.tolist() == [[0, -1, 0]]


@pytest.mark.parametrize("op", ["sum", "mean", "max"])
def test_aggregate_matches_loop_oracle(op):
    rng = np.random.default_rng(["sum", "mean", "max"].index(op))
    for _ in range(30):
        g = random_multigraph(rng, n_max=10, m_max=25)
        m = rng.standard_normal((3, g.num_edges))
        got = aggregate_neighbors(g, op, Tensor(m)).data
        assert np.allclose(got, loop_aggregate(g, m, op), rtol=1e-13, atol=1e-13)


# --- propagate --------------------------------------------------------------


def test_propagate_example_and_dense_oracle(p2):
    x = Tensor([[1.0, 2]])
    assert propagate(copy_xj, p2, "sum", xj=x).data.tolist() == [[2, 1]]
    g = GNNGraph([0, 1, 0], [1, 0, 0], 2)
    assert propagate(copy_xj, g, "sum", xj=x).data.tolist() == [[3, 1]]


def test_dispatch_takes_fused_path(monkeypatch):
    calls = []
    real = mp.spmm_csr
    monkeypatch.setattr(mp, "spmm_csr", lambda *a: calls.append(1) or real(*a))
    g = rand_graph(6, 10, 0)
    g = g.replace(edge_weight=np.linspace(0.1, 1, 10))
    x = Tensor(np.ones((2, 6)))
    e = Tensor(np.ones(10))
    for f in (copy_xj, e_mul_xj, w_mul_xj):
        for op in ("sum", "mean"):
            assert fusion_path(f, op) == "fused"
            propagate(f, g, op, xj=x, e=e)
    assert len(calls) == 6
    assert fusion_path(copy_xj, "max") == "two-step"
    propagate(copy_xj, g, "max", xj=x)
    assert len(calls) == 6


def test_custom_message_falls_back_exactly():
    rng = np.random.default_rng(2)
    g = random_multigraph(rng, 10, 30)
    x = Tensor(rng.standard_normal((3, g.num_nodes)))
    f = message(lambda xi, xj, e: T.tanh(T.add(xi, xj)))
    assert fusion_path(f, "sum") == "two-step"
    a = propagate(f, g, "sum", xi=x, xj=x)
    b = aggregate_neighbors(g, "sum", apply_edges(f, g, xi=x, xj=x))
    assert np.array_equal(a.data, b.data)
    with pytest.raises(ContractError):
        propagate(f, g, "sum", xi=x, xj=x, fuse=True)


@pytest.mark.parametrize("f", ["copy_xj", "e_mul_xj", "w_mul_xj"])
@pytest.mark.parametrize("op", ["sum", "mean"])
def test_fused_matches_two_step_single(f, op):
    rng = np.random.default_rng([len(f), len(op)])
    for _ in range(50):
        g = weighted_graph(rng)
        x = Tensor(rng.standard_normal((4, g.num_nodes)), dtype=np.float32)
        e = Tensor(rng.standard_normal((1, g.num_edges)), dtype=np.float32)
        g32 = g.replace(edge_weight=g.edge_weight.data.astype(np.float32))
        a = propagate(f, g32, op, xj=x, e=e, fuse=True).data
        b = propagate(f, g32, op, xj=x, e=e, fuse=False).data
        assert a.dtype == np.float32
        assert rel(a, b) < 1e-6


def test_propagate_dense_oracle_exhaustive_small():
    rng = np.random.default_rng(3)
    for n in range(1, 4):
        for g in all_simple_digraphs(n):
            x = rng.standard_normal((2, n))
            A = dense_adjacency_loops(g.sources, g.targets, n)
            got = propagate(copy_xj, g, "sum", xj=Tensor(x)).data
            assert rel(got, x @ A.T) < 1e-12


def test_spmm_weighted_dense_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        g = weighted_graph(rng, n_max=8, m_max=20)
        x = rng.standard_normal((3, g.num_nodes))
        w = g.edge_weight.data
        A = dense_adjacency_loops(g.sources, g.targets, g.num_nodes, w)
        got = spmm_csr(g, Tensor(x), Tensor(w)).data
        assert rel(got, x @ A.T) < 1e-12
    g = GNNGraph([], [], 3)
    assert not spmm_csr(g, Tensor(np.ones((2, 3)))).data.any()
    g = GNNGraph([0, 1], [1, 2], 3)
    assert not spmm_csr(g, Tensor(np.ones((2, 3))), Tensor(np.zeros(2))).data.any()


@pytest.mark.parametrize("op", ["sum", "mean", "max"])
def test_permutation_equivariance(op):
    rng = np.random.default_rng(["sum", "mean", "max"].index(op) + 10)
    for _ in range(30):
        g = random_multigraph(rng, 12, 40)
        x = rng.standard_normal((3, g.num_nodes))
        g = g.replace(ndata={"x": x})
        perm = rng.permutation(g.num_nodes)
        gp = permute_graph(g, perm)
        out = propagate(copy_xj, g, op, xj=g.x).data
        outp = propagate(copy_xj, gp, op, xj=gp.x).data
        if op == "sum":
            assert np.array_equal(outp[:, perm], out)
        else:
            assert np.allclose(outp[:, perm], out, rtol=1e-14, atol=0)


def _loss_through(f, g, op, fuse, xw, ew):
    def fn(x, e):
        out = propagate(f, g, op, xj=x, e=e, fuse=fuse)
        return T.sum(T.mul(T.tanh(out), Tensor(xw)))
    return fn


@pytest.mark.parametrize("fuse", [True, False])
@pytest.mark.parametrize("f,op", [("copy_xj", "sum"), ("e_mul_xj", "mean"), ("w_mul_xj", "sum"),
                                  ("e_mul_xj", "sum"), ("copy_xj", "mean")])
def test_propagate_gradients_match_fd(f, op, fuse):
    rng = np.random.default_rng(7)
    for _ in range(20):
        g = weighted_graph(rng, n_max=8, m_max=20)
        x = rng.standard_normal((3, g.num_nodes))
        ev = rng.standard_normal(g.num_edges)
        loss = _loss_through(f, g, op, fuse, rng.standard_normal((3, g.num_nodes)), None)
        xt, et = Tensor(x, requires_grad=True), Tensor(ev, requires_grad=True)
        with Tape() as tape:
            out = loss(xt, et)
        grads = backward(tape, out, {"x": xt, "e": et})
        nx = finite_diff_gradient(lambda t: loss(t, Tensor(ev)), Tensor(x), 1e-6).data
        assert rel(grads["x"].data, nx) < 1e-6
        if f == "e_mul_xj":
            ne = finite_diff_gradient(lambda t: loss(Tensor(x), t), Tensor(ev), 1e-6).data
            assert rel(grads["e"].data, ne) < 1e-6


def test_max_aggregation_gradient_matches_fd():
    rng = np.random.default_rng(8)
    for _ in range(20):
        g = random_multigraph(rng, 8, 20)
        m = rng.standard_normal((2, g.num_edges))
        w = rng.standard_normal((2, g.num_nodes))
        f = lambda t: T.sum(T.mul(aggregate_neighbors(g, "max", t), Tensor(w)))
        mt = Tensor(m, requires_grad=True)
        with Tape() as tape:
            out = f(mt)
        got = backward(tape, out, {"m": mt})["m"].data
        assert rel(got, finite_diff_gradient(f, Tensor(m), 1e-6).data) < 1e-6


# --- edge_softmax --------------------------------------------------------------


def test_edge_softmax_examples():
    g = GNNGraph([0, 2], [1, 1], 3)
    assert edge_softmax(g, Tensor([[0.0, 0]])).data.tolist() == [[0.5, 0.5]]
    big = edge_softmax(g, Tensor([[1000.0, 1000]])).data
    assert big.tolist() == [[0.5, 0.5]]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_edge_softmax_normalizes(seed):
    rng = np.random.default_rng(seed)
    g = random_multigraph(rng, 15, 40)
    logits = rng.standard_normal((2, g.num_edges)) * 30
    alpha = edge_softmax(g, Tensor(logits)).data
    assert np.all(alpha >= 0)
    sums = np.zeros((2, g.num_nodes))
    np.add.at(sums.T, g.targets, alpha.T)
    has_in = np.bincount(g.targets, minlength=g.num_nodes) > 0
    assert np.allclose(sums[:, has_in], 1, atol=1e-12)
    assert not sums[:, ~has_in].any()


def test_edge_softmax_gradient_matches_fd():
    rng = np.random.default_rng(9)
    for _ in range(20):
        g = random_multigraph(rng, 8, 20)
        logits = rng.standard_normal((2, g.num_edges))
        w = rng.standard_normal((2, g.num_edges))
        f = lambda t: T.sum(T.mul(edge_softmax(g, t), Tensor(w)))
        lt = Tensor(logits, requires_grad=True)
        with Tape() as tape:
            out = f(lt)
        got = backward(tape, out, {"l": lt})["l"].data
        assert rel(got, finite_diff_gradient(f, Tensor(logits), 1e-6).data) < 1e-6
