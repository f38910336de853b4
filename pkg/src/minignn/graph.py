"""GNNGraph: COO graph with node/edge/graph features, batching and utilities.

Edges are directed and messages flow source -> target. Node features are
stored column-per-node, so ``g.x`` has shape ``[feature_dim, num_nodes]``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, GraphIndexError, ResourceError
from .tensor import Tensor

DENSE_CAP = 4096

FeatureMap = Mapping[str, Union[Tensor, np.ndarray]]


@dataclass(frozen=True)
class CsrView:
    """Incoming-edge CSR: row ``t`` lists the edges whose target is ``t``.

    ``col_idx[k]`` is the source of the ``k``-th edge in CSR order and
    ``perm[k]`` its position in the COO edge list.
    """

    row_ptr: np.ndarray
    col_idx: np.ndarray
    perm: np.ndarray

    def row(self, t: int) -> np.ndarray:
        return self.col_idx[self.row_ptr[t] : self.row_ptr[t + 1]]


def _readonly_index(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.size == 0:
        arr = arr.astype(np.int64)
    if arr.dtype.kind not in "iu":
        if arr.dtype.kind == "f" and np.all(arr == np.round(arr)):
            arr = arr.astype(np.int64)
        else:
            raise ContractError(f"{name} must hold integers, got dtype {arr.dtype}")
    arr = np.array(arr, dtype=np.int64).reshape(-1)
    arr.flags.writeable = False
    return arr


def _as_feature(v) -> Tensor:
    if isinstance(v, Tensor):
        return v
    arr = np.asarray(v)
    if arr.dtype.kind in "iub":
        arr = arr.astype(np.float64)
    return Tensor(arr)


def _features(store: Optional[FeatureMap], count: int, level: str) -> Mapping[str, Tensor]:
    out = {}
    for name, v in (store or {}).items():
        t = _as_feature(v)
        if t.ndim == 0 or t.shape[-1] != count:
            raise DimensionError(
                f"{level} feature {name!r} has shape {t.shape}; last extent must be {count}"
            )
        out[name] = t
    return MappingProxyType(out)


class GNNGraph:
    """Immutable directed multigraph in COO form.

    Features live in three name-keyed stores whose tensors end with the
    matching count: ``ndata`` (num_nodes), ``edata`` (num_edges) and
    ``gdata`` (num_graphs). Feature names are reachable as attributes,
    e.g. ``g.x`` or ``g.y``.
    """

    __slots__ = (
        "num_nodes", "sources", "targets", "edge_weight", "ndata", "edata", "gdata",
        "graph_indicator", "num_graphs", "_csr", "_csr_lock", "_derived",
    )

    def __init__(
        self,
        sources: Sequence[int] = (),
        targets: Sequence[int] = (),
        num_nodes: Optional[int] = None,
        *,
        ndata: Optional[FeatureMap] = None,
        edata: Optional[FeatureMap] = None,
        gdata: Optional[FeatureMap] = None,
        edge_weight=None,
        graph_indicator=None,
        num_graphs: int = 1,
    ):
        src = _readonly_index(sources, "sources")
        dst = _readonly_index(targets, "targets")
        if src.shape != dst.shape:
            raise DimensionError(f"{src.size} sources but {dst.size} targets")
        if num_nodes is None:
            num_nodes = int(np.max(np.concatenate([src, dst]))) + 1 if src.size else 0
        num_nodes = int(num_nodes)
        if num_nodes < 0:
            raise ContractError("num_nodes must be non-negative")
        for name, idx in (("source", src), ("target", dst)):
            bad = np.flatnonzero((idx < 0) | (idx >= num_nodes))
            if bad.size:
                e = int(bad[0])
                raise GraphIndexError(f"edge {e}: {name} {int(idx[e])} outside [0, {num_nodes})")

        if num_graphs < 1:
            raise ContractError("num_graphs must be at least 1")
        if graph_indicator is None:
            gi = np.zeros(num_nodes, dtype=np.int64)
            if num_graphs != 1:
                raise ContractError("num_graphs > 1 requires a graph_indicator")
        else:
            gi = np.array(graph_indicator, dtype=np.int64).reshape(-1)
            if gi.size != num_nodes:
                raise DimensionError(f"graph_indicator has {gi.size} entries for {num_nodes} nodes")
            if gi.size and (gi.min() < 0 or gi.max() >= num_graphs):
                raise GraphIndexError(f"graph_indicator values must lie in [0, {num_graphs})")
            if np.any(np.diff(gi) < 0):
                raise ContractError("graph_indicator must be non-decreasing")
            if src.size and np.any(gi[src] != gi[dst]):
                e = int(np.flatnonzero(gi[src] != gi[dst])[0])
                raise ContractError(f"edge {e} connects nodes of different graphs")
        gi.flags.writeable = False

        if edge_weight is not None:
            w = edge_weight if isinstance(edge_weight, Tensor) else Tensor(np.asarray(edge_weight, dtype=np.float64))
            if w.shape != (src.size,):
                raise DimensionError(f"edge_weight has shape {w.shape}; expected ({src.size},)")
            edge_weight = w

        object.__setattr__(self, "num_nodes", num_nodes)
        object.__setattr__(self, "sources", src)
        object.__setattr__(self, "targets", dst)
        object.__setattr__(self, "edge_weight", edge_weight)
        object.__setattr__(self, "ndata", _features(ndata, num_nodes, "node"))
        object.__setattr__(self, "edata", _features(edata, src.size, "edge"))
        object.__setattr__(self, "gdata", _features(gdata, num_graphs, "graph"))
        object.__setattr__(self, "graph_indicator", gi)
        object.__setattr__(self, "num_graphs", int(num_graphs))
        object.__setattr__(self, "_csr", None)
        object.__setattr__(self, "_csr_lock", threading.Lock())
        object.__setattr__(self, "_derived", {})

    def cached(self, key, build):
        """Memoize a structure derived from this (immutable) graph.

        Concurrent callers may both build; the first stored value wins.
        """
        hit = self._derived.get(key)
        if hit is None:
            hit = self._derived.setdefault(key, build())
        return hit

    def __setattr__(self, name, value):
        raise AttributeError("GNNGraph is immutable")

    def __getattr__(self, name):
        if name.startswith("_"):
            raise AttributeError(name)
        hits = [store[name] for store in (self.ndata, self.edata, self.gdata) if name in store]
        if len(hits) == 1:
            return hits[0]
        if len(hits) > 1:
            raise AttributeError(f"feature {name!r} is ambiguous; index ndata/edata/gdata directly")
        raise AttributeError(f"GNNGraph has no attribute or feature {name!r}")

    @property
    def num_edges(self) -> int:
        return int(self.sources.size)

    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        return self.sources, self.targets

    def replace(self, **kw) -> "GNNGraph":
        """Copy with some constructor arguments swapped out."""
        args = dict(
            sources=self.sources, targets=self.targets, num_nodes=self.num_nodes,
            ndata=dict(self.ndata), edata=dict(self.edata), gdata=dict(self.gdata),
            edge_weight=self.edge_weight, graph_indicator=self.graph_indicator,
            num_graphs=self.num_graphs,
        )
        args.update(kw)
        return GNNGraph(**args)

    def __eq__(self, other):
        if not isinstance(other, GNNGraph):
            return NotImplemented
        if (self.num_nodes, self.num_graphs) != (other.num_nodes, other.num_graphs):
            return False
        if not (
            np.array_equal(self.sources, other.sources)
            and np.array_equal(self.targets, other.targets)
            and np.array_equal(self.graph_indicator, other.graph_indicator)
        ):
            return False
        if (self.edge_weight is None) != (other.edge_weight is None):
            return False
        if self.edge_weight is not None and not _tensor_equal(self.edge_weight, other.edge_weight):
            return False
        for a, b in ((self.ndata, other.ndata), (self.edata, other.edata), (self.gdata, other.gdata)):
            if a.keys() != b.keys() or not all(_tensor_equal(a[k], b[k]) for k in a):
                return False
        return True

    __hash__ = None

    def __repr__(self):
        return (
            f"GNNGraph(num_nodes={self.num_nodes}, num_edges={self.num_edges}, "
            f"num_graphs={self.num_graphs}, ndata={list(self.ndata)}, "
            f"edata={list(self.edata)}, gdata={list(self.gdata)})"
        )


def _tensor_equal(a: Tensor, b: Tensor) -> bool:
    return a.dtype == b.dtype and np.array_equal(a.data, b.data)


def from_coo(
    sources, targets, num_nodes=None, ndata=None, edata=None, gdata=None, edge_weight=None
) -> GNNGraph:
    return GNNGraph(sources, targets, num_nodes, ndata=ndata, edata=edata, gdata=gdata, edge_weight=edge_weight)


def to_csr(g: GNNGraph) -> CsrView:
    """Incoming-edge CSR of ``g``, built once and cached on the graph."""
    csr = g._csr
    if csr is not None:
        return csr
    with g._csr_lock:
        if g._csr is None:
            perm = np.argsort(g.targets, kind="stable")
            counts = np.bincount(g.targets, minlength=g.num_nodes)
            row_ptr = np.zeros(g.num_nodes + 1, dtype=np.int64)
            np.cumsum(counts, out=row_ptr[1:])
            col_idx = g.sources[perm]
            for a in (row_ptr, col_idx, perm):
                a.flags.writeable = False
            object.__setattr__(g, "_csr", CsrView(row_ptr, np.asarray(col_idx, dtype=np.int64), perm.astype(np.int64)))
        return g._csr


def adjacency_dense(g: GNNGraph, weighted: bool = False, cap: int = DENSE_CAP, dtype=np.float64) -> Tensor:
    """``A[t, s]`` counts edges s -> t (or sums their weights)."""
    n = g.num_nodes
    if n > cap:
        raise ResourceError(f"{n} nodes exceeds the dense adjacency cap of {cap}")
    A = np.zeros((n, n), dtype=dtype)
    vals = _edge_values(g, weighted)
    np.add.at(A, (g.targets, g.sources), vals)
    return Tensor._wrap(A)


def _edge_values(g: GNNGraph, weighted: bool) -> np.ndarray:
    if not weighted:
        return np.ones(g.num_edges)
    if g.edge_weight is None:
        raise ContractError("weighted operation on a graph without edge_weight")
    return g.edge_weight.data.astype(np.float64)


def degree(g: GNNGraph, direction: str = "in", weighted: bool = False, dtype=np.float64) -> Tensor:
    if direction not in ("in", "out"):
        raise ContractError(f"direction must be 'in' or 'out', got {direction!r}")
    idx = g.targets if direction == "in" else g.sources
    d = np.bincount(idx, weights=_edge_values(g, weighted), minlength=g.num_nodes)
    return Tensor._wrap(d.astype(dtype))


def add_self_loops(g: GNNGraph) -> GNNGraph:
    """Append one edge ``i -> i`` per node after the existing edges."""
    if g.edata:
        raise ContractError("add_self_loops is undefined for graphs carrying edge features")
    nodes = np.arange(g.num_nodes, dtype=np.int64)
    w = None
    if g.edge_weight is not None:
        ew = g.edge_weight.data
        w = Tensor._wrap(np.concatenate([ew, np.ones(g.num_nodes, dtype=ew.dtype)]))
    return g.replace(
        sources=np.concatenate([g.sources, nodes]),
        targets=np.concatenate([g.targets, nodes]),
        edge_weight=w,
    )


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def rand_graph(n: int, m: int, rng=None, *, ndata=None, edata=None, gdata=None) -> GNNGraph:
    """Directed simple graph with ``m`` distinct non-loop edges drawn uniformly.

    Candidate pairs are drawn uniformly and rejected when they are loops or
    repeat an already accepted pair, so every ``m``-subset of the
    ``n*(n-1)`` ordered pairs is equally likely.
    """
    n, m = int(n), int(m)
    if n < 0 or m < 0:
        raise ContractError("n and m must be non-negative")
    if m > n * (n - 1):
        raise ContractError(f"cannot place {m} edges in a simple directed graph on {n} nodes")
    gen = _rng(rng)
    seen: set[int] = set()
    keys: list[int] = []
    while len(keys) < m:
        need = m - len(keys)
        draw = gen.integers(0, n, size=(2, 2 * need + 8))
        for s, t in zip(draw[0].tolist(), draw[1].tolist()):
            if s == t:
                continue
            k = s * n + t
            if k in seen:
                continue
            seen.add(k)
            keys.append(k)
            if len(keys) == m:
                break
    arr = np.array(keys, dtype=np.int64)
    src, dst = (arr // n, arr % n) if n else (arr, arr)
    return GNNGraph(src, dst, n, ndata=ndata, edata=edata, gdata=gdata)


def _concat_store(graphs: Sequence[GNNGraph], attr: str) -> dict:
    first = getattr(graphs[0], attr)
    out = {}
    for k, g in enumerate(graphs):
        store = getattr(g, attr)
        if store.keys() != first.keys():
            missing = sorted(set(first) ^ set(store))
            raise DimensionError(f"graph {k}: {attr} feature names differ ({missing[0]!r})")
    for name, t0 in first.items():
        parts = []
        for k, g in enumerate(graphs):
            t = getattr(g, attr)[name]
            if t.shape[:-1] != t0.shape[:-1] or t.dtype != t0.dtype:
                raise DimensionError(
                    f"graph {k}: {attr} feature {name!r} has shape {t.shape} {t.dtype}, "
                    f"expected {t0.shape[:-1]}+(*,) {t0.dtype}"
                )
            parts.append(t.data)
        out[name] = Tensor._wrap(np.concatenate(parts, axis=-1))
    return out


def batch(graphs: Sequence[GNNGraph]) -> GNNGraph:
    """Disjoint union of ``graphs`` with features concatenated along the last axis."""
    graphs = list(graphs)
    if not graphs:
        raise ContractError("batch needs at least one graph")
    weighted = [g.edge_weight is not None for g in graphs]
    if any(weighted) and not all(weighted):
        raise DimensionError("either all graphs or none must carry edge_weight")
    node_off = np.cumsum([0] + [g.num_nodes for g in graphs])
    graph_off = np.cumsum([0] + [g.num_graphs for g in graphs])
    src = np.concatenate([g.sources + node_off[k] for k, g in enumerate(graphs)])
    dst = np.concatenate([g.targets + node_off[k] for k, g in enumerate(graphs)])
    gi = np.concatenate([g.graph_indicator + graph_off[k] for k, g in enumerate(graphs)])
    w = None
    if all(weighted):
        w = Tensor._wrap(np.concatenate([g.edge_weight.data for g in graphs]))
    return GNNGraph(
        src, dst, int(node_off[-1]),
        ndata=_concat_store(graphs, "ndata"),
        edata=_concat_store(graphs, "edata"),
        gdata=_concat_store(graphs, "gdata"),
        edge_weight=w,
        graph_indicator=gi,
        num_graphs=int(graph_off[-1]),
    )


def unbatch(g: GNNGraph) -> list[GNNGraph]:
    """Split a batched graph back into its ``num_graphs`` components."""
    if g.num_graphs == 1:
        return [g]
    bounds = np.searchsorted(g.graph_indicator, np.arange(g.num_graphs + 1), side="left")
    edge_graph = g.graph_indicator[g.sources]
    out = []
    for k in range(g.num_graphs):
        lo, hi = int(bounds[k]), int(bounds[k + 1])
        emask = edge_graph == k
        out.append(
            GNNGraph(
                g.sources[emask] - lo,
                g.targets[emask] - lo,
                hi - lo,
                ndata={n: Tensor._wrap(t.data[..., lo:hi]) for n, t in g.ndata.items()},
                edata={n: Tensor._wrap(t.data[..., emask]) for n, t in g.edata.items()},
                gdata={n: Tensor._wrap(t.data[..., k : k + 1]) for n, t in g.gdata.items()},
                edge_weight=None if g.edge_weight is None else Tensor._wrap(g.edge_weight.data[emask]),
            )
        )
    return out


class TemporalSnapshotsGNNGraph:
    """Ordered snapshots of a time-varying graph plus per-snapshot features."""

    def __init__(self, snapshots: Sequence[GNNGraph], tgdata: Optional[FeatureMap] = None):
        snapshots = tuple(snapshots)
        if not snapshots:
            raise ContractError("a temporal graph needs at least one snapshot")
        self.snapshots = snapshots
        self.tgdata = _features(tgdata, len(snapshots), "temporal graph")

    @property
    def num_snapshots(self) -> int:
        return len(self.snapshots)

    def __len__(self):
        return len(self.snapshots)

    def __getitem__(self, t: int) -> GNNGraph:
        return snapshot_at(self, t)

    def __repr__(self):
        return f"TemporalSnapshotsGNNGraph(num_snapshots={self.num_snapshots})"


def temporal_from_snapshots(gs: Sequence[GNNGraph], tgdata=None) -> TemporalSnapshotsGNNGraph:
    return TemporalSnapshotsGNNGraph(gs, tgdata)


def snapshot_at(tg: TemporalSnapshotsGNNGraph, t: int) -> GNNGraph:
    if not 0 <= t < tg.num_snapshots:
        raise GraphIndexError(f"snapshot {t} outside [0, {tg.num_snapshots})")
    return tg.snapshots[t]
