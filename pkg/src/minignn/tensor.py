"""Dense tensors and a tape-based reverse-mode autodiff engine.

Feature matrices follow the column-per-node layout ``[feature_dim, num_nodes]``.
Only the operations the graph layers need are provided; there is no general
broadcasting beyond :func:`add_bias` and the explicit row/column scaling ops.

Recording happens only inside an active :class:`Tape`::

    with Tape() as tape:
        loss = mean(square(matmul(w, x)))
    grads = backward(tape, loss, {"w": w})
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, DomainError, GraphIndexError, PrecisionError

SINGLE = np.dtype(np.float32)
DOUBLE = np.dtype(np.float64)
_PRECISIONS = (SINGLE, DOUBLE)

Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable shaped array of single or double precision.

    ``requires_grad`` marks a leaf (parameter or input) whose gradient is
    wanted. Tensors produced while a tape is recording carry a reference to
    their tape node.
    """

    __slots__ = ("data", "requires_grad", "name", "_tape", "_node_id")
    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None and arr.dtype not in _PRECISIONS:
            arr = arr.astype(DOUBLE)
        if arr.dtype not in _PRECISIONS:
            raise PrecisionError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None
        self._node_id = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad=False, tape=None, node_id=None) -> "Tensor":
        t = cls.__new__(cls)
        if not arr.flags.owndata or not arr.flags.writeable:
            arr = arr.copy()
        t.data = _freeze(arr)
        t.requires_grad = requires_grad
        t.name = None
        t._tape = tape
        t._node_id = node_id
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "single" if self.data.dtype == SINGLE else "double"

    @property
    def node_id(self) -> Optional[int]:
        return self._node_id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        out = Tensor(self.data, dtype=dtype, requires_grad=self.requires_grad, name=self.name)
        return out

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        if dtype is not None and x.dtype != np.dtype(dtype):
            raise PrecisionError(f"expected {np.dtype(dtype)}, got {x.dtype}")
        return x
    return Tensor(x, dtype=dtype)


def zeros(shape, dtype=DOUBLE) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=DOUBLE) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=dtype))


def parameter(data, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# tape


@dataclass(frozen=True)
class TapeNode:
    id: int
    op: str
    inputs: tuple
    vjp: Optional[Vjp]
    shape: tuple
    dtype: np.dtype
    saved: Optional[np.ndarray] = None


_ACTIVE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("minignn_tape", default=None)


class Tape:
    """Append-only record of operations for one forward pass.

    A tape belongs to one thread and one training step. Backward never
    mutates it, so it can be replayed.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._leaf_ids: dict[int, int] = {}
        self._leaves: dict[int, Tensor] = {}
        self._tokens: list = []

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE.set(self))
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._tokens.pop())
        return False

    def _append(self, op, inputs, vjp, shape, dtype, saved=None) -> int:
        nid = len(self.nodes)
        self.nodes.append(TapeNode(nid, op, tuple(inputs), vjp, tuple(shape), np.dtype(dtype), saved))
        return nid

    def watch(self, t: Tensor) -> int:
        """Register ``t`` as a leaf on this tape and return its node id."""
        if t._tape is self:
            return t._node_id
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None:
            nid = self._append("leaf", (), None, t.shape, t.dtype)
            self._leaf_ids[key] = nid
            self._leaves[nid] = t
        return nid

    def _input_id(self, t: Tensor) -> Optional[int]:
        if t._tape is self:
            return t._node_id
        if t.requires_grad:
            return self.watch(t)
        return None

    def node_of(self, t: Tensor) -> Optional[int]:
        if t._tape is self:
            return t._node_id
        return self._leaf_ids.get(id(t))

    def leaves(self) -> dict[int, Tensor]:
        return dict(self._leaves)


def active_tape() -> Optional[Tape]:
    return _ACTIVE.get()


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp, saved=None) -> Tensor:
    """Wrap ``out`` as a tensor, recording ``vjp`` when any input is tracked.

    ``vjp`` maps the upstream gradient of ``out`` to one gradient (or None)
    per entry of ``inputs``. ``saved`` is kept on the node for inspection
    (kink detection in gradient checks); the engine itself never reads it.
    """
    out = np.asarray(out)
    tape = _ACTIVE.get()
    if tape is None:
        return Tensor._wrap(out)
    ids = tuple(tape._input_id(t) for t in inputs)
    if all(i is None for i in ids):
        return Tensor._wrap(out)
    nid = tape._append(op, ids, vjp, out.shape, out.dtype, saved)
    return Tensor._wrap(out, requires_grad=True, tape=tape, node_id=nid)


class GradientMap(dict):
    """Parameter name -> gradient tensor of the parameter's shape."""


def backward(tape: Tape, seed: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> GradientMap:
    """Reverse sweep from the scalar ``seed``.

    Without ``params`` every leaf registered on the tape is reported, keyed by
    its ``name`` (or ``leaf<id>``). Parameters the seed does not depend on get
    zero gradients.
    """
    if seed.size != 1:
        raise ContractError(f"backward needs a scalar seed, got shape {seed.shape}")
    grads: dict[int, np.ndarray] = {}
    seed_id = tape.node_of(seed)
    if seed_id is not None:
        grads[seed_id] = np.ones(seed.shape, dtype=seed.dtype)
        for node in reversed(tape.nodes[: seed_id + 1]):
            g = grads.get(node.id)
            if g is None or node.vjp is None:
                continue
            for nid, ig in zip(node.inputs, node.vjp(g)):
                if nid is None or ig is None:
                    continue
                target = tape.nodes[nid]
                ig = np.asarray(ig, dtype=target.dtype)
                if ig.shape != target.shape:
                    ig = ig.reshape(target.shape)
                prev = grads.get(nid)
                grads[nid] = ig if prev is None else prev + ig

    if params is None:
        params = {(t.name or f"leaf{nid}"): t for nid, t in tape.leaves().items()}
    out = GradientMap()
    for name, p in params.items():
        nid = tape.node_of(p)
        g = grads.get(nid) if nid is not None else None
        if g is None:
            g = np.zeros(p.shape, dtype=p.dtype)
        out[name] = Tensor._wrap(np.array(g, dtype=p.dtype))
    return out


def value_and_gradient(fn: Callable[[], Tensor], params: Mapping[str, Tensor]):
    with Tape() as tape:
        value = fn()
    return value, backward(tape, value, params)


def gradient(fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> GradientMap:
    return value_and_gradient(fn, params)[1]


# ---------------------------------------------------------------------------
# checks


def _same_precision(*ts: Tensor) -> np.dtype:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise PrecisionError(f"mixed precision: {dt} and {t.dtype}")
    return dt


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _need_rank(op: str, t: Tensor, rank: int):
    if t.ndim != rank:
        raise DimensionError(f"{op}: expected rank {rank}, got shape {t.shape}")


def _index_array(index, bound: int) -> np.ndarray:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    bad = np.flatnonzero((idx < 0) | (idx >= bound))
    if bad.size:
        pos = int(bad[0])
        raise GraphIndexError(f"index {int(idx[pos])} at position {pos} outside [0, {bound})")
    return idx


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_precision(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return record("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every column of ``x``."""
    _same_precision(x, b)
    _need_rank("add_bias", x, 2)
    if b.ndim != 1 or b.shape[0] != x.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    return record("add_bias", x.data + b.data[:, None], (x, b), lambda g: (g, g.sum(axis=1)))


def scale_rows(x: Tensor, v: Tensor) -> Tensor:
    """Multiply row ``i`` of ``x`` by ``v[i]``."""
    _same_precision(x, v)
    _need_rank("scale_rows", x, 2)
    if v.ndim != 1 or v.shape[0] != x.shape[0]:
        raise DimensionError(f"scale_rows: vector {v.shape} does not match rows of {x.shape}")
    X, V = x.data, v.data
    return record("scale_rows", X * V[:, None], (x, v), lambda g: (g * V[:, None], (g * X).sum(axis=1)))


def scale_columns(x: Tensor, v: Tensor) -> Tensor:
    """Multiply column ``j`` of ``x`` by ``v[j]``."""
    _same_precision(x, v)
    _need_rank("scale_columns", x, 2)
    if v.ndim != 1 or v.shape[0] != x.shape[1]:
        raise DimensionError(f"scale_columns: vector {v.shape} does not match columns of {x.shape}")
    X, V = x.data, v.data
    return record("scale_columns", X * V[None, :], (x, v), lambda g: (g * V[None, :], (g * X).sum(axis=0)))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def vec(x: Tensor) -> Tensor:
    return reshape(x, (-1,))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return record("slice_rows", x.data[start:stop], (x,), vjp)


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    _same_precision(*xs)
    sizes = np.cumsum([t.shape[0] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=0)
    return record("concat_rows", out, tuple(xs), lambda g: tuple(np.split(g, sizes, axis=0)))


# ---------------------------------------------------------------------------
# elementwise


def _unary(op, x: Tensor, value, deriv, saved=None) -> Tensor:
    return record(op, value, (x,), lambda g: (g * deriv(),), saved)


def relu(x: Tensor) -> Tensor:
    X = x.data
    return _unary("relu", x, np.where(X > 0, X, 0).astype(X.dtype), lambda: (X > 0).astype(X.dtype), X)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    X = x.data
    out = np.where(X > 0, X, slope * X).astype(X.dtype)
    return _unary("leaky_relu", x, out, lambda: np.where(X > 0, 1.0, slope).astype(X.dtype), X)


def sigmoid(x: Tensor) -> Tensor:
    X = x.data
    s = (0.5 * (1.0 + np.tanh(0.5 * X))).astype(X.dtype)
    return _unary("sigmoid", x, s, lambda: s * (1 - s))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _unary("tanh", x, t, lambda: 1 - t * t)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _unary("exp", x, e, lambda: e)


def square(x: Tensor) -> Tensor:
    X = x.data
    return _unary("square", x, X * X, lambda: 2 * X)


def sqrt(x: Tensor) -> Tensor:
    s = np.sqrt(x.data)
    return _unary("sqrt", x, s, lambda: 0.5 / s)


def power(x: Tensor, p: float) -> Tensor:
    X = x.data
    return _unary("power", x, X**p, lambda: p * X ** (p - 1))


def neg(x: Tensor) -> Tensor:
    return record("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return record("add_scalar", x.data + x.dtype.type(c), (x,), lambda g: (g,))


def identity(x: Tensor) -> Tensor:
    return x


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_precision(a, b)
    _same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_precision(a, b)
    _same_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_precision(a, b)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return record("mul", A * B, (a, b), lambda g: (g * B, g * A))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_precision(a, b)
    _same_shape("div", a, b)
    A, B = a.data, b.data
    return record("div", A / B, (a, b), lambda g: (g / B, -g * A / (B * B)))


def mul_scalar_tensor(x: Tensor, s: Tensor) -> Tensor:
    """``s * x`` for a single-element tensor ``s`` (used for trainable scalars)."""
    _same_precision(x, s)
    if s.size != 1:
        raise DimensionError(f"expected a single-element scale, got shape {s.shape}")
    X, S = x.data, s.data
    c = S.reshape(())
    return record("mul_scalar", X * c, (x, s), lambda g: (g * c, np.reshape((g * X).sum(), S.shape)))


_ELEMENTWISE = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "square": square,
    "mul": mul,
    "sub": sub,
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# reductions


def _check_axis(x: Tensor, axis):
    if axis is None:
        return None
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def reduce(x: Tensor, kind: str, axis: Optional[int] = None) -> Tensor:
    axis = _check_axis(x, axis)
    X = x.data
    shape = X.shape
    count = X.size if axis is None else shape[axis]

    def spread(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    if kind == "sum":
        return record("sum", X.sum(axis=axis), (x,), lambda g: (spread(g),))
    if kind == "mean":
        if count == 0:
            out = np.zeros(X.sum(axis=axis).shape, dtype=X.dtype)
            return record("mean", out, (x,), lambda g: (np.zeros(shape, dtype=X.dtype),))
        return record("mean", X.mean(axis=axis), (x,), lambda g: (spread(g) / X.dtype.type(count),))
    if kind == "max":
        if count == 0 or X.size == 0:
            raise DomainError(f"max over an empty tensor of shape {shape}")
        if axis is None:
            i = int(np.argmax(X))

            def vjp(g):
                out = np.zeros(X.size, dtype=X.dtype)
                out[i] = g.reshape(())
                return (out.reshape(shape),)

            return record("max", X.reshape(-1)[i], (x,), vjp)
        arg = np.expand_dims(np.argmax(X, axis=axis), axis)

        def vjp(g):
            out = np.zeros(shape, dtype=X.dtype)
            np.put_along_axis(out, arg, np.expand_dims(g, axis), axis=axis)
            return (out,)

        return record("max", np.take_along_axis(X, arg, axis=axis).squeeze(axis), (x,), vjp)
    raise ContractError(f"unknown reduction {kind!r}")


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    return reduce(x, "sum", axis)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    return reduce(x, "mean", axis)


def max(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    return reduce(x, "max", axis)


# ---------------------------------------------------------------------------
# graph-indexed primitives


def _scatter_add_np(src: np.ndarray, idx: np.ndarray, num_out: int) -> np.ndarray:
    out = np.zeros((src.shape[0], num_out), dtype=src.dtype)
    np.add.at(out.T, idx, src.T)
    return out


def gather_columns(x: Tensor, index) -> Tensor:
    """Column ``j`` of the result is column ``index[j]`` of ``x``."""
    _need_rank("gather_columns", x, 2)
    n = x.shape[1]
    idx = _index_array(index, n)
    return record("gather_columns", x.data[:, idx], (x,), lambda g: (_scatter_add_np(g, idx, n),))


def scatter_add(src: Tensor, index, num_out: int) -> Tensor:
    """Sum the columns of ``src`` into ``num_out`` columns selected by ``index``."""
    _need_rank("scatter_add", src, 2)
    idx = _index_array(index, num_out)
    if idx.shape[0] != src.shape[1]:
        raise DimensionError(f"scatter_add: {idx.shape[0]} indices for {src.shape[1]} columns")
    return record("scatter_add", _scatter_add_np(src.data, idx, num_out), (src,), lambda g: (g[:, idx],))


# ---------------------------------------------------------------------------
# test oracle


def finite_diff_gradient(f: Callable[[Tensor], Union[Tensor, float]], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x`` (double precision only)."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    if x.dtype != DOUBLE:
        raise PrecisionError("finite differences require double precision")
    base = np.array(x.data, dtype=DOUBLE)
    grad = np.zeros(base.size)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(f(Tensor(base)))
        flat[i] = orig - eps
        fm = _scalar(f(Tensor(base)))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return Tensor._wrap(grad.reshape(x.shape))


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)
