"""Graph convolution layers, plain layers and the GNNChain container.

Layers are stateful objects holding named parameter tensors. Because
tensors are immutable, an optimizer produces new tensors which are loaded
back with :meth:`Layer.load_parameters`.
"""

from __future__ import annotations

import re
from typing import Callable, Iterable, Mapping, Optional, Union

import numpy as np

from .errors import ContractError, DimensionError
from .graph import GNNGraph, add_self_loops as _with_self_loops
from .message_passing import aggregation, copy_xj, e_mul_xj, edge_softmax, propagate, segment_max, spmm_csr
from .tensor import (
    Tensor,
    add,
    add_bias,
    add_scalar,
    concat_rows,
    gather_columns,
    leaky_relu,
    matmul,
    mean,
    mul_scalar_tensor,
    neg,
    power,
    relu,
    scale,
    scale_columns,
    scale_rows,
    scatter_add,
    sigmoid,
    slice_rows,
    square,
    tanh,
)

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "identity": lambda x: x,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def _activation(act) -> Callable[[Tensor], Tensor]:
    if act is None:
        return ACTIVATIONS["identity"]
    if callable(act):
        return act
    try:
        return ACTIVATIONS[act]
    except KeyError:
        raise ContractError(f"unknown activation {act!r}") from None


def _act_name(act) -> str:
    if act is None or isinstance(act, str):
        return act or "identity"
    for name, fn in ACTIVATIONS.items():
        if fn is act:
            return name
    return getattr(act, "__name__", "custom")


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def glorot_uniform(dout: int, din: int, rng=None, dtype=np.float32) -> Tensor:
    """Uniform on (-a, a) with a = sqrt(6 / (din + dout))."""
    if dout <= 0 or din <= 0:
        raise ContractError(f"glorot_uniform needs positive dims, got ({dout}, {din})")
    a = np.sqrt(6.0 / (din + dout))
    return Tensor(_rng(rng).uniform(-a, a, size=(dout, din)), dtype=dtype)


def _zeros(n: int, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype))


class Layer:
    """Base class: named parameters, non-trainable buffers and sub-layers."""

    graph_aware = False
    in_dim: Optional[int] = None
    out_dim: Optional[int] = None

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, Tensor] = {}
        self._children: dict[str, "Layer"] = {}
        self.training = True

    def _param(self, name: str, value: Tensor):
        self._params[name] = Tensor(value.data, requires_grad=True, name=name)

    def __getattr__(self, name):
        d = self.__dict__
        for store in ("_params", "_buffers", "_children"):
            if store in d and name in d[store]:
                return d[store][name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.parameters(f"{prefix}{cname}."))
        return out

    def buffers(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for cname, child in self._children.items():
            out.update(child.buffers(f"{prefix}{cname}."))
        return out

    def state_dict(self) -> dict[str, Tensor]:
        return {**self.parameters(), **self.buffers()}

    def load_parameters(self, values: Mapping[str, Tensor], strict: bool = False):
        """Replace parameters and buffers by name; values are cast to the current dtype."""
        used = set()
        for k, old in self._params.items():
            if k in values:
                self._params[k] = _replacement(k, old, values[k], trainable=True)
                used.add(k)
        for k, old in self._buffers.items():
            if k in values:
                self._buffers[k] = _replacement(k, old, values[k], trainable=False)
                used.add(k)
        for cname, child in self._children.items():
            pre = cname + "."
            sub = {k[len(pre):]: v for k, v in values.items() if k.startswith(pre)}
            if sub:
                child.load_parameters(sub, strict=strict)
                used.update(pre + k for k in sub)
        if strict:
            expected = set(self.state_dict())
            if expected != set(values):
                missing = sorted(expected - set(values))
                extra = sorted(set(values) - expected)
                raise ContractError(f"state mismatch: missing {missing}, unexpected {extra}")

    load_state_dict = load_parameters

    def to(self, dtype) -> "Layer":
        for store in (self._params, self._buffers):
            for k, v in store.items():
                store[k] = Tensor(v.data, dtype=dtype, requires_grad=v.requires_grad, name=k)
        for child in self._children.values():
            child.to(dtype)
        return self

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def _check_input(self, x: Tensor, g: Optional[GNNGraph] = None):
        if x.ndim != 2:
            raise DimensionError(f"{type(self).__name__}: input must be [d, n], got {x.shape}")
        if self.in_dim is not None and x.shape[0] != self.in_dim:
            raise DimensionError(f"{type(self).__name__}: expected {self.in_dim} input features, got {x.shape[0]}")
        if g is not None and x.shape[1] != g.num_nodes:
            raise DimensionError(f"{type(self).__name__}: input has {x.shape[1]} columns for {g.num_nodes} nodes")


def _replacement(name: str, old: Tensor, new, trainable: bool) -> Tensor:
    data = new.data if isinstance(new, Tensor) else np.asarray(new)
    if tuple(data.shape) != old.shape:
        raise DimensionError(f"{name}: shape {tuple(data.shape)} does not match {old.shape}")
    return Tensor(data, dtype=old.dtype, requires_grad=trainable, name=name)


class Dense(Layer):
    def __init__(self, din: int, dout: int, activation=None, rng=None, dtype=np.float32):
        super().__init__()
        self.in_dim, self.out_dim = din, dout
        self.activation = activation
        self.sigma = _activation(activation)
        self._param("weight", glorot_uniform(dout, din, rng, dtype))
        self._param("bias", _zeros(dout, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        self._check_input(x)
        return self.sigma(add_bias(matmul(self.weight, x), self.bias))

    def __repr__(self):
        return f"Dense({self.in_dim} => {self.out_dim}, {_act_name(self.activation)})"


class GraphConv(Layer):
    """``σ(W1·x + W2·m + b)`` where ``m`` aggregates the source features of incoming edges."""

    graph_aware = True

    def __init__(self, din: int, dout: int, activation=None, aggr="sum", rng=None, dtype=np.float32):
        super().__init__()
        rng = _rng(rng)
        self.in_dim, self.out_dim = din, dout
        self.activation = activation
        self.sigma = _activation(activation)
        self.aggr = aggregation(aggr)
        self._param("weight1", glorot_uniform(dout, din, rng, dtype))
        self._param("weight2", glorot_uniform(dout, din, rng, dtype))
        self._param("bias", _zeros(dout, dtype))

    def __call__(self, g: GNNGraph, x: Tensor) -> Tensor:
        self._check_input(x, g)
        m = propagate(copy_xj, g, self.aggr, xj=x)
        h = add(matmul(self.weight1, x), matmul(self.weight2, m))
        return self.sigma(add_bias(h, self.bias))

    def __repr__(self):
        return f"GraphConv({self.in_dim} => {self.out_dim}, {_act_name(self.activation)}, aggr={self.aggr})"


def _topology(g: GNNGraph, weighted: bool) -> GNNGraph:
    return GNNGraph(
        g.sources, g.targets, g.num_nodes,
        edge_weight=g.edge_weight if weighted else None,
        graph_indicator=g.graph_indicator, num_graphs=g.num_graphs,
    )


def _propagation_graph(g: GNNGraph, self_loops: bool, weighted: bool) -> GNNGraph:
    def build():
        h = _topology(g, weighted)
        return _with_self_loops(h) if self_loops else h

    return g.cached(("topology", self_loops, weighted), build)


def gcn_edge_coefficients(g: GNNGraph, self_loops: bool = True, use_edge_weight: bool = False):
    """Graph actually propagated over and its per-edge ``w_e / sqrt(d_t d_s)`` scale."""
    weighted = use_edge_weight and g.edge_weight is not None
    return g.cached(("gcn", self_loops, weighted), lambda: _gcn_coefficients(g, self_loops, weighted))


def _gcn_coefficients(g: GNNGraph, self_loops: bool, weighted: bool):
    h = _propagation_graph(g, self_loops, weighted)
    w = h.edge_weight.data.astype(np.float64) if weighted else np.ones(h.num_edges)
    deg = np.bincount(h.targets, weights=w, minlength=h.num_nodes)
    inv = np.zeros_like(deg)
    pos = deg > 0
    inv[pos] = 1.0 / np.sqrt(deg[pos])
    return h, w * inv[h.targets] * inv[h.sources]


class GCNConv(Layer):
    """Symmetric-normalized graph convolution with optional self-loops."""

    graph_aware = True

    def __init__(self, din: int, dout: int, activation=None, add_self_loops: bool = True,
                 use_edge_weight: bool = False, rng=None, dtype=np.float32):
        super().__init__()
        self.in_dim, self.out_dim = din, dout
        self.activation = activation
        self.sigma = _activation(activation)
        self.add_self_loops = add_self_loops
        self.use_edge_weight = use_edge_weight
        self._param("weight", glorot_uniform(dout, din, rng, dtype))
        self._param("bias", _zeros(dout, dtype))

    def __call__(self, g: GNNGraph, x: Tensor) -> Tensor:
        self._check_input(x, g)
        h, coef = gcn_edge_coefficients(g, self.add_self_loops, self.use_edge_weight)
        c = Tensor(coef, dtype=x.dtype)
        if self.out_dim < self.in_dim:
            out = spmm_csr(h, matmul(self.weight, x), c)
        else:
            out = matmul(self.weight, spmm_csr(h, x, c))
        return self.sigma(add_bias(out, self.bias))

    def __repr__(self):
        return f"GCNConv({self.in_dim} => {self.out_dim}, {_act_name(self.activation)})"


class GINConv(Layer):
    """``MLP((1 + ε)·x + Σ_j x_j)`` with a two-layer MLP."""

    graph_aware = True

    def __init__(self, din: int, dout: int, hidden: Optional[int] = None, eps: float = 0.0,
                 train_eps: bool = False, activation=None, rng=None, dtype=np.float32):
        super().__init__()
        rng = _rng(rng)
        hidden = hidden or dout
        self.in_dim, self.out_dim = din, dout
        self.activation = activation
        self.sigma = _activation(activation)
        self.train_eps = train_eps
        self.eps = float(eps)
        self._children["mlp0"] = Dense(din, hidden, "relu", rng, dtype)
        self._children["mlp1"] = Dense(hidden, dout, None, rng, dtype)
        if train_eps:
            self._param("epsilon", Tensor(np.array([eps]), dtype=dtype))

    def __call__(self, g: GNNGraph, x: Tensor) -> Tensor:
        self._check_input(x, g)
        agg = propagate(copy_xj, g, "sum", xj=x)
        if self.train_eps:
            self_term = add(x, mul_scalar_tensor(x, self.epsilon))
        else:
            self_term = scale(x, 1.0 + self.eps)
        h = add(self_term, agg)
        return self.sigma(self.mlp1(self.mlp0(h)))

    def __repr__(self):
        return f"GINConv({self.in_dim} => {self.out_dim}, eps={self.eps}, train_eps={self.train_eps})"


class GATConv(Layer):
    """Graph attention with a shared linear map and per-head attention vectors."""

    graph_aware = True

    def __init__(self, din: int, dout: int, activation=None, heads: int = 1, concat: bool = True,
                 negative_slope: float = 0.2, add_self_loops: bool = True, rng=None, dtype=np.float32):
        super().__init__()
        rng = _rng(rng)
        if heads < 1:
            raise ContractError("heads must be positive")
        if concat and dout % heads:
            raise ContractError(f"output dim {dout} is not divisible by {heads} heads")
        self.in_dim, self.out_dim = din, dout
        self.heads, self.concat = heads, concat
        self.head_dim = dout // heads if concat else dout
        self.negative_slope = negative_slope
        self.add_self_loops = add_self_loops
        self.activation = activation
        self.sigma = _activation(activation)
        self._param("weight", glorot_uniform(heads * self.head_dim, din, rng, dtype))
        self._param("att_src", glorot_uniform(heads, self.head_dim, rng, dtype))
        self._param("att_dst", glorot_uniform(heads, self.head_dim, rng, dtype))
        self._param("bias", _zeros(dout, dtype))

    def attention(self, g: GNNGraph, x: Tensor):
        """Propagation graph, per-head node embeddings and per-head edge coefficients."""
        h = _propagation_graph(g, self.add_self_loops, False)
        z = matmul(self.weight, x)
        dh = self.head_dim
        zs, alphas = [], []
        for k in range(self.heads):
            zk = slice_rows(z, k * dh, (k + 1) * dh)
            s_src = matmul(slice_rows(self.att_src, k, k + 1), zk)
            s_dst = matmul(slice_rows(self.att_dst, k, k + 1), zk)
            logits = add(gather_columns(s_dst, h.targets), gather_columns(s_src, h.sources))
            zs.append(zk)
            alphas.append(edge_softmax(h, leaky_relu(logits, self.negative_slope)))
        return h, zs, alphas

    def __call__(self, g: GNNGraph, x: Tensor) -> Tensor:
        self._check_input(x, g)
        h, zs, alphas = self.attention(g, x)
        outs = [propagate(e_mul_xj, h, "sum", xj=zk, e=a) for zk, a in zip(zs, alphas)]
        if self.concat:
            out = concat_rows(outs) if len(outs) > 1 else outs[0]
        else:
            out = outs[0]
            for o in outs[1:]:
                out = add(out, o)
            out = scale(out, 1.0 / self.heads)
        return self.sigma(add_bias(out, self.bias))

    def __repr__(self):
        return f"GATConv({self.in_dim} => {self.out_dim}, heads={self.heads}, concat={self.concat})"


class BatchNorm(Layer):
    """Per-feature normalization across the node axis of the batch."""

    def __init__(self, d: int, activation=None, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.in_dim = self.out_dim = d
        self.momentum, self.eps = momentum, eps
        self.activation = activation
        self.sigma = _activation(activation)
        self._param("gamma", Tensor(np.ones(d), dtype=dtype))
        self._param("beta", _zeros(d, dtype))
        self._buffers["running_mean"] = _zeros(d, dtype)
        self._buffers["running_var"] = Tensor(np.ones(d), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        self._check_input(x)
        if self.training:
            if x.shape[1] == 0:
                raise ContractError("BatchNorm in training mode needs at least one node")
            mu = mean(x, axis=1)
            xc = add_bias(x, neg(mu))
            var = mean(square(xc), axis=1)
            inv = power(add_scalar(var, self.eps), -0.5)
            m = self.momentum
            dt = x.dtype
            self._buffers["running_mean"] = Tensor((1 - m) * self.running_mean.data + m * mu.data, dtype=dt)
            self._buffers["running_var"] = Tensor((1 - m) * self.running_var.data + m * var.data, dtype=dt)
        else:
            rm, rv = self.running_mean.data, self.running_var.data
            xc = add_bias(x, Tensor(-rm, dtype=x.dtype))
            inv = Tensor(1.0 / np.sqrt(rv.astype(np.float64) + self.eps), dtype=x.dtype)
        y = scale_rows(xc, inv)
        return self.sigma(add_bias(scale_rows(y, self.gamma), self.beta))

    def __repr__(self):
        return f"BatchNorm({self.in_dim})"


class GlobalPool(Layer):
    """Reduce node columns to one column per graph (mean, sum or max)."""

    graph_aware = True

    def __init__(self, mode: str = "mean"):
        super().__init__()
        if mode not in ("mean", "sum", "max"):
            raise ContractError(f"unknown pooling mode {mode!r}")
        self.mode = mode

    def __call__(self, g: GNNGraph, x: Tensor) -> Tensor:
        self._check_input(x, g)
        gi = g.graph_indicator
        if self.mode == "max":
            offsets = np.searchsorted(gi, np.arange(g.num_graphs + 1), side="left").astype(np.int64)
            return segment_max(x, offsets, np.arange(g.num_nodes, dtype=np.int64))
        out = scatter_add(x, gi, g.num_graphs)
        if self.mode == "mean":
            counts = np.bincount(gi, minlength=g.num_graphs)
            out = scale_columns(out, Tensor(1.0 / np.maximum(counts, 1), dtype=x.dtype))
        return out

    def __repr__(self):
        return f"GlobalPool({self.mode})"


def global_pool(g: GNNGraph, x: Tensor, mode: str = "mean") -> Tensor:
    return GlobalPool(mode)(g, x)


class Activation(Layer):
    def __init__(self, name: str):
        super().__init__()
        self.name = name
        self.fn = _activation(name)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fn(x)

    def __repr__(self):
        return self.name


class Lambda(Layer):
    """Wrap a plain function ``x -> y`` as a chain element."""

    def __init__(self, fn: Callable[[Tensor], Tensor], graph_aware: bool = False):
        super().__init__()
        self.fn = fn
        self.graph_aware = graph_aware

    def __call__(self, *args):
        return self.fn(*args)


class GNNChain(Layer):
    """Layers applied left to right; graph-aware ones receive ``(g, x)``.

    Dimensions are checked when the chain is built.
    """

    graph_aware = True

    def __init__(self, *layers):
        super().__init__()
        if len(layers) == 1 and isinstance(layers[0], (list, tuple)):
            layers = tuple(layers[0])
        self.layers = [lyr if isinstance(lyr, Layer) else Lambda(lyr) for lyr in layers]
        for i, lyr in enumerate(self.layers):
            self._children[str(i)] = lyr
        dim = None
        for i, lyr in enumerate(self.layers):
            if lyr.in_dim is not None:
                if dim is not None and lyr.in_dim != dim:
                    raise DimensionError(f"layer {i} ({lyr!r}) expects {lyr.in_dim} features, previous layer gives {dim}")
                if self.in_dim is None and dim is None:
                    self.in_dim = lyr.in_dim
            if lyr.out_dim is not None:
                dim = lyr.out_dim
        self.out_dim = dim

    def __call__(self, g: GNNGraph, x: Optional[Tensor] = None) -> Tensor:
        if x is None:
            x = g.ndata["x"]
        for lyr in self.layers:
            x = lyr(g, x) if lyr.graph_aware else lyr(x)
        return x

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def __repr__(self):
        inner = ", ".join(repr(lyr) for lyr in self.layers)
        return f"GNNChain({inner})"


# ---------------------------------------------------------------------------
# model configuration grammar: "gcn:16-64, batchnorm:64, relu, pool:mean, dense:64-1"

DEFAULT_MODEL = "gcn:16-64, batchnorm:64, relu, gcn:64-64:relu, pool:mean, dense:64-1"

_DIMS = re.compile(r"^(\d+)-(\d+)$")
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_item(item: str, rng, dtype) -> Layer:
    parts = [p.strip() for p in item.split(":")]
    kind, args = parts[0].lower(), parts[1:]
    if kind in ACTIVATIONS and not args:
        return Activation(kind)
    if kind == "pool":
        return GlobalPool(args[0] if args else "mean")

    dims, act, opts = None, None, {}
    for a in args:
        if _DIMS.match(a):
            dims = tuple(int(v) for v in _DIMS.match(a).groups())
        elif a.isdigit():
            dims = (int(a), int(a))
        elif "=" in a:
            k, v = a.split("=", 1)
            opts[k.strip()] = v.strip()
        elif a in ACTIVATIONS:
            act = a
        else:
            raise ContractError(f"cannot parse {a!r} in layer spec {item!r}")
    if dims is None:
        raise ContractError(f"layer spec {item!r} needs dimensions like 16-64")
    din, dout = dims

    def flag(name, default):
        if name not in opts:
            return default
        try:
            return _BOOL[opts.pop(name).lower()]
        except KeyError:
            raise ContractError(f"{item!r}: {name} must be true or false") from None

    def num(name, default, cast=float):
        return cast(opts.pop(name)) if name in opts else default

    try:
        if kind == "dense":
            layer = Dense(din, dout, act, rng, dtype)
        elif kind == "graphconv":
            layer = GraphConv(din, dout, act, opts.pop("aggr", "sum"), rng, dtype)
        elif kind in ("gcn", "gcnconv"):
            layer = GCNConv(din, dout, act, flag("self_loops", True), flag("edge_weight", False), rng, dtype)
        elif kind in ("gin", "ginconv"):
            layer = GINConv(din, dout, num("hidden", None, int), num("eps", 0.0), flag("train_eps", False), act, rng, dtype)
        elif kind in ("gat", "gatconv"):
            layer = GATConv(din, dout, act, num("heads", 1, int), flag("concat", True),
                            num("negative_slope", 0.2), flag("self_loops", True), rng, dtype)
        elif kind == "batchnorm":
            if din != dout:
                raise ContractError(f"batchnorm keeps its width, got {din}-{dout}")
            layer = BatchNorm(din, act, num("momentum", 0.1), num("eps", 1e-5), dtype)
        else:
            raise ContractError(f"unknown layer kind {kind!r}")
    except ValueError as err:
        if isinstance(err, ContractError):
            raise
        raise ContractError(f"{item!r}: {err}") from None
    if opts:
        raise ContractError(f"{item!r}: unknown options {sorted(opts)}")
    return layer


def parse_model(spec: str, rng=None, dtype=np.float32) -> GNNChain:
    """Build a GNNChain from a comma-separated layer description."""
    rng = _rng(rng)
    items = [s for s in (p.strip() for p in spec.split(",")) if s]
    if not items:
        raise ContractError("empty model specification")
    return GNNChain([_parse_item(it, rng, dtype) for it in items])
