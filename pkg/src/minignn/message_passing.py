"""Message passing on GNNGraph: apply_edges, aggregate_neighbors, propagate.

``xi`` always denotes target-node features and ``xj`` source-node features.
``propagate`` routes built-in message functions combined with sum/mean
aggregation through a single CSR sparse-dense product instead of
materializing one message column per edge.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError, PrecisionError
from .graph import GNNGraph, to_csr
from .tensor import (
    Tensor,
    gather_columns,
    record,
    scale_columns,
    scatter_add,
    vec,
)

BUILTIN_KINDS = ("copy_xj", "e_mul_xj", "w_mul_xj")
_REQUIRES = {"copy_xj": ("xj",), "e_mul_xj": ("xj", "e"), "w_mul_xj": ("xj",)}


@dataclass(frozen=True)
class MessageFunction:
    """A per-edge message. Built-in kinds carry no callable.

    ``fn(xi, xj, e)`` for custom messages receives the gathered per-edge
    tensors (or None for arguments not supplied) and returns ``[dm, E]``.
    """

    kind: str
    fn: Optional[Callable] = None
    requires: tuple = ()

    def __post_init__(self):
        if self.kind == "custom":
            if self.fn is None:
                raise ContractError("a custom message function needs a callable")
        elif self.kind in BUILTIN_KINDS:
            if self.fn is not None:
                raise ContractError(f"built-in message {self.kind!r} takes no callable")
            object.__setattr__(self, "requires", _REQUIRES[self.kind])
        else:
            raise ContractError(f"unknown message kind {self.kind!r}")

    def __call__(self, xi, xj, e):
        return self.fn(xi, xj, e)


copy_xj = MessageFunction("copy_xj")
e_mul_xj = MessageFunction("e_mul_xj")
w_mul_xj = MessageFunction("w_mul_xj")


def message(fn: Callable, requires=()) -> MessageFunction:
    """Wrap ``fn(xi, xj, e)`` as a custom message function."""
    return MessageFunction("custom", fn, tuple(requires))


_AGGR_ALIASES = {"sum": "sum", "+": "sum", "add": "sum", "mean": "mean", "max": "max"}


def aggregation(op: Union[str, Callable]) -> str:
    if callable(op):
        op = getattr(op, "__name__", "")
        op = {"add": "sum", "sum": "sum", "mean": "mean", "max": "max", "amax": "max"}.get(op, op)
    try:
        return _AGGR_ALIASES[op]
    except (KeyError, TypeError):
        raise ContractError(f"unsupported aggregation {op!r}; use sum, mean or max") from None


def _as_message(f) -> MessageFunction:
    if isinstance(f, MessageFunction):
        return f
    if isinstance(f, str):
        return MessageFunction(f)
    if callable(f):
        return message(f)
    raise ContractError(f"not a message function: {f!r}")


def _check_inputs(f: MessageFunction, g: GNNGraph, xi, xj, e):
    for name, t in (("xi", xi), ("xj", xj)):
        if t is not None and (t.ndim != 2 or t.shape[1] != g.num_nodes):
            raise DimensionError(f"{name} has shape {t.shape}; expected [d, {g.num_nodes}]")
    if e is not None and (e.ndim not in (1, 2) or e.shape[-1] != g.num_edges):
        raise DimensionError(f"e has shape {e.shape}; expected [de, {g.num_edges}]")
    given = {"xi": xi, "xj": xj, "e": e}
    for name in f.requires:
        if given[name] is None:
            raise ContractError(f"message {f.kind!r} requires {name!r}")
    if f.kind == "w_mul_xj" and g.edge_weight is None:
        raise ContractError("w_mul_xj requires a graph with edge_weight")
    if f.kind == "e_mul_xj" and not (e.ndim == 1 or e.shape[0] == 1):
        raise DimensionError(f"e_mul_xj needs one coefficient per edge, got e of shape {e.shape}")


def _edge_weight_const(g: GNNGraph, dtype) -> Tensor:
    return Tensor._wrap(g.edge_weight.data.astype(dtype))


def apply_edges(f, g: GNNGraph, xi: Optional[Tensor] = None, xj: Optional[Tensor] = None, e: Optional[Tensor] = None) -> Tensor:
    """Evaluate message ``f`` on every edge; returns ``[dm, num_edges]``."""
    f = _as_message(f)
    _check_inputs(f, g, xi, xj, e)
    xi_e = gather_columns(xi, g.targets) if xi is not None else None
    xj_e = gather_columns(xj, g.sources) if xj is not None else None
    if f.kind == "copy_xj":
        return xj_e
    if f.kind == "e_mul_xj":
        return scale_columns(xj_e, vec(e))
    if f.kind == "w_mul_xj":
        return scale_columns(xj_e, _edge_weight_const(g, xj.dtype))
    out = f(xi_e, xj_e, e)
    if not isinstance(out, Tensor) or out.ndim != 2 or out.shape[1] != g.num_edges:
        shape = getattr(out, "shape", None)
        raise DimensionError(f"message function returned shape {shape}; expected [dm, {g.num_edges}]")
    return out


def _inv_in_degree(g: GNNGraph, dtype) -> Tensor:
    def build():
        deg = np.bincount(g.targets, minlength=g.num_nodes)
        return Tensor._wrap((1.0 / np.maximum(deg, 1)).astype(dtype))

    return g.cached(("inv_in_degree", np.dtype(dtype).str), build)


def segment_max(v: Tensor, offsets: np.ndarray, order: np.ndarray) -> Tensor:
    """Max over column segments of ``v``; empty segments give 0.

    Segment ``t`` covers columns ``order[offsets[t]:offsets[t+1]]``. Ties
    route the gradient to the first column in segment order.
    """
    V = v.data
    out_t, arg = _kernels.segment_max(offsets, order, np.ascontiguousarray(V.T))
    shape = V.shape

    def vjp(g):
        dv = np.zeros(shape, dtype=g.dtype)
        t_idx, r_idx = np.nonzero(arg >= 0)
        np.add.at(dv, (r_idx, arg[t_idx, r_idx]), g[r_idx, t_idx])
        return (dv,)

    return record("segment_max", np.ascontiguousarray(out_t.T), (v,), vjp)


def aggregate_neighbors(g: GNNGraph, op, m: Tensor) -> Tensor:
    """Reduce edge messages ``m`` into their target nodes; returns ``[dm, n]``."""
    op = aggregation(op)
    if m.ndim != 2 or m.shape[1] != g.num_edges:
        raise DimensionError(f"messages have shape {m.shape}; expected [dm, {g.num_edges}]")
    if op == "max":
        csr = to_csr(g)
        return segment_max(m, csr.row_ptr, csr.perm)
    out = scatter_add(m, g.targets, g.num_nodes)
    if op == "mean":
        out = scale_columns(out, _inv_in_degree(g, m.dtype))
    return out


def spmm_csr(g: GNNGraph, x: Tensor, edge_scale: Optional[Tensor] = None) -> Tensor:
    """``out[:, t] = sum_{e: target(e)=t} edge_scale[e] * x[:, source(e)]``.

    One pass over the incoming-edge CSR rows, no per-edge message buffer.
    """
    if x.ndim != 2 or x.shape[1] != g.num_nodes:
        raise DimensionError(f"x has shape {x.shape}; expected [d, {g.num_nodes}]")
    csr = to_csr(g)
    inputs = (x,)
    if edge_scale is None:
        scale_coo = np.ones(g.num_edges, dtype=x.dtype)
    else:
        if not isinstance(edge_scale, Tensor):
            edge_scale = Tensor(np.asarray(edge_scale, dtype=x.dtype))
        if edge_scale.dtype != x.dtype:
            raise PrecisionError(f"mixed precision: {x.dtype} and {edge_scale.dtype}")
        if edge_scale.shape != (g.num_edges,):
            raise DimensionError(f"edge_scale has shape {edge_scale.shape}; expected ({g.num_edges},)")
        scale_coo = edge_scale.data
        inputs = (x, edge_scale)
    scale = np.ascontiguousarray(scale_coo[csr.perm])
    xt = np.ascontiguousarray(x.data.T)
    out = _kernels.csr_spmm(csr.row_ptr, csr.col_idx, scale, xt)
    n = g.num_nodes

    def vjp(gr):
        gt = np.ascontiguousarray(gr.T)
        dx = np.ascontiguousarray(_kernels.csr_spmm_transpose(csr.row_ptr, csr.col_idx, scale, gt, n).T)
        if len(inputs) == 1:
            return (dx,)
        ds = np.empty(g.num_edges, dtype=gr.dtype)
        ds[csr.perm] = _kernels.csr_edge_dot(csr.row_ptr, csr.col_idx, gt, xt)
        return (dx, ds)

    return record("spmm_csr", np.ascontiguousarray(out.T), inputs, vjp)


def fusion_path(f, op, e: Optional[Tensor] = None) -> str:
    """Which path ``propagate`` takes: ``"fused"`` or ``"two-step"``."""
    f = _as_message(f)
    if f.kind in BUILTIN_KINDS and aggregation(op) in ("sum", "mean"):
        return "fused"
    return "two-step"


def propagate(
    f,
    g: GNNGraph,
    op,
    xi: Optional[Tensor] = None,
    xj: Optional[Tensor] = None,
    e: Optional[Tensor] = None,
    fuse: Optional[bool] = None,
) -> Tensor:
    """``aggregate_neighbors(g, op, apply_edges(f, g, xi, xj, e))``, fused when possible.

    ``fuse`` forces a path for diagnostics: True demands the fused kernel,
    False the two-step composition, None picks automatically.
    """
    f = _as_message(f)
    op = aggregation(op)
    fusable = fusion_path(f, op) == "fused"
    if fuse is None:
        fuse = fusable
    elif fuse and not fusable:
        raise ContractError(f"no fused kernel for message {f.kind!r} with aggregation {op!r}")
    if not fuse:
        return aggregate_neighbors(g, op, apply_edges(f, g, xi, xj, e))

    _check_inputs(f, g, xi, xj, e)
    scale = None
    if f.kind == "e_mul_xj":
        scale = vec(e)
    elif f.kind == "w_mul_xj":
        scale = _edge_weight_const(g, xj.dtype)
    out = spmm_csr(g, xj, scale)
    if op == "mean":
        out = scale_columns(out, _inv_in_degree(g, xj.dtype))
    return out


def edge_softmax(g: GNNGraph, logits: Tensor) -> Tensor:
    """Softmax of ``logits [h, E]`` over the incoming edges of each target node."""
    if logits.ndim != 2 or logits.shape[1] != g.num_edges:
        raise DimensionError(f"logits have shape {logits.shape}; expected [h, {g.num_edges}]")
    csr = to_csr(g)
    L = logits.data
    tgt = g.targets
    mx_t, _ = _kernels.segment_max(csr.row_ptr, csr.perm, np.ascontiguousarray(L.T))
    ex = np.exp(L - mx_t.T[:, tgt])
    denom = np.zeros((L.shape[0], g.num_nodes), dtype=L.dtype)
    np.add.at(denom.T, tgt, ex.T)
    alpha = ex / denom[:, tgt]

    def vjp(gr):
        ag = alpha * gr
        s = np.zeros_like(denom)
        np.add.at(s.T, tgt, ag.T)
        return (ag - alpha * s[:, tgt],)

    return record("edge_softmax", alpha, (logits,), vjp)
