"""Adam, MSE loss, graph data loader, synthetic teacher dataset and the fit loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError
from .graph import GNNGraph, batch, rand_graph
from .layers import DEFAULT_MODEL, GNNChain, Layer, parse_model
from .tensor import Tensor, Tape, backward, mean, square, sub, vec

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_setup(params: Mapping[str, Tensor], lr: float = 1e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    state = AdamState(lr, beta1, beta2, eps)
    for k, p in params.items():
        state.m[k] = np.zeros(p.shape, dtype=p.dtype)
        state.v[k] = np.zeros(p.shape, dtype=p.dtype)
    return state


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, Tensor]):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise ContractError(f"no gradient for parameter(s) {missing}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k].data
        dt = p.dtype.type
        m = state.m.get(k, np.zeros(p.shape, p.dtype))
        v = state.v.get(k, np.zeros(p.shape, p.dtype))
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        step = dt(state.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        new_params[k] = Tensor(p.data - step, dtype=p.dtype, requires_grad=p.requires_grad, name=p.name)
        new_m[k], new_v[k] = m, v
    return new_params, replace(state, t=t, m=new_m, v=new_v)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences after flattening both tensors."""
    if pred.size != target.size:
        raise DimensionError(f"prediction has {pred.size} elements, target has {target.size}")
    return mean(square(sub(vec(pred), vec(target))))


class DataLoader:
    """Iterate over graphs in batches; each pass over the loader is one epoch.

    Shuffling for epoch ``k`` uses a generator seeded with ``(seed, k)``.
    The last partial batch is kept.
    """

    def __init__(self, data: Sequence[GNNGraph], batchsize: int = 32, shuffle: bool = True,
                 collate: bool = True, seed: int = 0):
        if batchsize < 1:
            raise ContractError("batchsize must be at least 1")
        if len(data) == 0:
            raise ContractError("DataLoader needs a non-empty dataset")
        self.data = list(data)
        self.batchsize = batchsize
        self.shuffle = shuffle
        self.collate = collate
        self.seed = seed
        self.epoch = 0

    def __len__(self):
        return math.ceil(len(self.data) / self.batchsize)

    def epoch_order(self, epoch: int) -> np.ndarray:
        idx = np.arange(len(self.data))
        if self.shuffle:
            np.random.default_rng([self.seed, epoch]).shuffle(idx)
        return idx

    def __iter__(self) -> Iterator:
        order = self.epoch_order(self.epoch)
        self.epoch += 1
        for lo in range(0, len(order), self.batchsize):
            chunk = [self.data[i] for i in order[lo : lo + self.batchsize]]
            yield batch(chunk) if self.collate else chunk


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    batchsize: int = 32
    num_graphs: int = 128
    nodes: int = 10
    edges: int = 30
    feature_dim: int = 16
    seed: int = 1
    model: str = DEFAULT_MODEL
    paper_random_y: bool = False
    noise: float = 0.01

    def __post_init__(self):
        for name in ("batchsize", "num_graphs", "feature_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        for name in ("epochs", "nodes", "edges"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if self.lr < 0:
            raise ContractError("lr must be non-negative")


def make_synthetic_dataset(cfg: TrainConfig, rng=None) -> list[GNNGraph]:
    """Random graphs with Gaussian node features and a scalar target.

    By default the target is ``tanh(u · mean_nodes(x))`` plus small noise for
    a teacher vector ``u`` drawn once; with ``paper_random_y`` it is pure
    Gaussian noise independent of the features.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(cfg.seed if rng is None else rng)
    d, n = cfg.feature_dim, cfg.nodes
    u = rng.standard_normal(d)
    out = []
    for _ in range(cfg.num_graphs):
        g = rand_graph(n, cfg.edges, rng)
        x = rng.standard_normal((d, n)).astype(np.float32)
        if cfg.paper_random_y:
            y = rng.standard_normal()
        else:
            y = np.tanh(u @ x.astype(np.float64).mean(axis=1)) + cfg.noise * rng.standard_normal()
        out.append(g.replace(ndata={"x": x}, gdata={"y": np.array([y], dtype=np.float32)}))
    return out


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    wall_ms: float

    def csv(self) -> str:
        return f"{self.epoch},{self.mean_loss!r},{self.wall_ms:.3f}"


@dataclass
class TrainResult:
    metrics: list[EpochMetrics]
    opt_state: AdamState


def graph_loss(model: Layer, g: GNNGraph) -> Tensor:
    return mse_loss(model(g, g.ndata["x"]), g.gdata["y"])


def fit(
    model: Layer,
    data: Sequence[GNNGraph],
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
    loss_fn: Callable[[Layer, GNNGraph], Tensor] = graph_loss,
) -> TrainResult:
    """Train ``model`` in place with Adam on mini-batches of ``data``."""
    loader = DataLoader(data, cfg.batchsize, shuffle=True, collate=True, seed=cfg.seed)
    state = adam_setup(model.parameters(), cfg.lr)
    model.train()
    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        total, count = 0.0, 0
        for b, g in enumerate(loader, start=1):
            params = model.parameters()
            with Tape() as tape:
                loss = loss_fn(model, g)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            grads = backward(tape, loss, params)
            new_params, state = adam_step(state, params, grads)
            model.load_parameters(new_params)
            total += value * g.num_graphs
            count += g.num_graphs
        m = EpochMetrics(epoch, total / count, (time.perf_counter() - start) * 1e3)
        logger.debug("epoch %d loss %.6f", epoch, m.mean_loss)
        metrics.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return TrainResult(metrics, state)


def build_model(cfg: TrainConfig, dtype=np.float32) -> GNNChain:
    model = parse_model(cfg.model, rng=np.random.default_rng([cfg.seed, 7]), dtype=dtype)
    if model.in_dim is not None and model.in_dim != cfg.feature_dim:
        raise ContractError(f"model expects {model.in_dim} input features, dataset has {cfg.feature_dim}")
    if model.out_dim not in (None, 1):
        raise ContractError(f"model must produce one output per graph, got {model.out_dim}")
    return model


def train(cfg: TrainConfig, on_epoch=None, data: Optional[Sequence[GNNGraph]] = None):
    """Build the model and dataset described by ``cfg`` and fit."""
    model = build_model(cfg)
    if data is None:
        data = make_synthetic_dataset(cfg)
    result = fit(model, data, cfg, on_epoch)
    return model, result
