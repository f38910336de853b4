"""Finite-difference verification of analytic gradients for every layer kind."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .graph import GNNGraph, batch, rand_graph
from .layers import (
    BatchNorm,
    Dense,
    GATConv,
    GCNConv,
    GINConv,
    GlobalPool,
    GraphConv,
    Layer,
    parse_model,
)
from .tensor import DOUBLE, Tape, Tensor, backward, finite_diff_gradient, mul, sum as tsum

KINK_MARGIN = 1e-4
_KINKED_OPS = ("relu", "leaky_relu")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


Objective = Callable[[Mapping[str, Tensor]], tuple]


def compare_gradients(objective: Objective, values: Mapping[str, Tensor], eps: float = 1e-5):
    """Analytic vs central-difference gradients for each named input of ``objective``.

    ``objective(values)`` returns ``(scalar, tracked)`` where ``tracked`` maps
    the same names to the tensors actually used in the forward pass.
    Returns ``(errors, min_kink_distance)``.
    """
    leaves = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in values.items()}
    with Tape() as tape:
        loss, tracked = objective(leaves)
    grads = backward(tape, loss, tracked)
    kink = np.inf
    for node in tape.nodes:
        if node.op in _KINKED_OPS and node.saved is not None and node.saved.size:
            kink = min(kink, float(np.abs(node.saved).min()))
    errors = {}
    for name, v in values.items():
        def f(t, name=name):
            return objective({**values, name: t})[0]

        numeric = finite_diff_gradient(f, Tensor(v.data, dtype=DOUBLE), eps)
        errors[name] = relative_error(grads[name].data, numeric.data)
    return errors, kink


def layer_objective(layer: Layer, g: GNNGraph, weights: Tensor) -> Objective:
    """Scalar ``sum(layer(g, x) * weights)`` as a function of params and ``x``."""

    def objective(vals):
        layer.load_parameters({k: v for k, v in vals.items() if k != "x"})
        x = vals["x"]
        out = layer(g, x) if layer.graph_aware else layer(x)
        used = {**layer.parameters(), "x": x}
        return tsum(mul(out, weights)), used

    return objective


def check_layer(layer: Layer, g: GNNGraph, x: np.ndarray, rng: np.random.Generator, eps: float = 1e-5):
    layer.to(DOUBLE)
    values = {**layer.parameters(), "x": Tensor(x, dtype=DOUBLE)}
    probe = layer(g, values["x"]) if layer.graph_aware else layer(values["x"])
    weights = Tensor(rng.standard_normal(probe.shape))
    return compare_gradients(layer_objective(layer, g, weights), values, eps)


# ---------------------------------------------------------------------------
# suite


def _random_graph(rng, n_max=12, parts=1) -> GNNGraph:
    gs = []
    for _ in range(parts):
        n = int(rng.integers(2, n_max + 1))
        m = int(rng.integers(0, min(n * (n - 1), 3 * n) + 1))
        gs.append(rand_graph(n, m, rng))
    return gs[0] if parts == 1 else batch(gs)


def _build(kind: str, rng, din: int, dout: int) -> tuple[Layer, int]:
    """Layer of the given kind and the number of graphs its test input should batch."""
    if kind == "dense":
        return Dense(din, dout, "tanh", rng), 1
    if kind == "graphconv":
        aggr = ("sum", "mean", "max")[int(rng.integers(3))]
        return GraphConv(din, dout, "relu", aggr=aggr, rng=rng), 1
    if kind == "gcnconv":
        return GCNConv(din, dout, "relu", add_self_loops=bool(rng.integers(2)), rng=rng), 1
    if kind == "ginconv":
        return GINConv(din, dout, hidden=int(rng.integers(1, 9)), eps=0.3, train_eps=True, rng=rng), 1
    if kind == "gatconv":
        heads = int(rng.integers(1, 3))
        concat = bool(rng.integers(2))
        return GATConv(din, heads * dout if concat else dout, "tanh", heads=heads, concat=concat, rng=rng), 1
    if kind in ("batchnorm", "batchnorm_train"):
        bn = BatchNorm(din)
        bn.load_parameters({
            "gamma": rng.uniform(0.5, 1.5, din), "beta": rng.standard_normal(din),
            "running_mean": rng.standard_normal(din), "running_var": rng.uniform(0.5, 2.0, din),
        })
        bn.train(kind == "batchnorm_train")
        return bn, 1
    if kind == "globalpool":
        return GlobalPool(("mean", "sum", "max")[int(rng.integers(3))]), int(rng.integers(1, 4))
    if kind == "chain":
        spec = (f"gcn:{din}-4, batchnorm:4, relu, graphconv:4-4:tanh:aggr=mean, "
                f"gat:4-4:heads=2, gin:4-3:train_eps=true, pool:mean, dense:3-1")
        return parse_model(spec, rng), int(rng.integers(1, 4))
    raise ValueError(f"unknown layer kind {kind!r}")


LAYER_KINDS = ("dense", "graphconv", "gcnconv", "ginconv", "gatconv", "batchnorm",
               "batchnorm_train", "globalpool", "chain")


@dataclass
class LayerReport:
    layer: str
    max_rel_err: float
    worst: str
    instances: int


def run_suite(kinds: Optional[Sequence[str]] = None, instances: int = 20, seed: int = 0,
              eps: float = 1e-5, n_max: int = 12, d_max: int = 8) -> list[LayerReport]:
    """Check every parameter and the input of each layer kind on random graphs.

    Instances whose activations sit within ``KINK_MARGIN`` of a relu kink are
    redrawn, since central differences are meaningless there.
    """
    reports = []
    for kind in kinds or LAYER_KINDS:
        rng = np.random.default_rng([seed, LAYER_KINDS.index(kind) if kind in LAYER_KINDS else 99])
        worst, where, done = 0.0, "", 0
        while done < instances:
            din, dout = (int(v) for v in rng.integers(1, d_max + 1, size=2))
            layer, parts = _build(kind, rng, din, dout)
            g = _random_graph(rng, n_max, parts)
            x = rng.standard_normal((din, g.num_nodes))
            errors, kink = check_layer(layer, g, x, rng, eps)
            if kink < KINK_MARGIN:
                continue
            done += 1
            for name, err in errors.items():
                if err >= worst:
                    worst, where = err, name
        reports.append(LayerReport(kind, worst, where, instances))
    return reports
