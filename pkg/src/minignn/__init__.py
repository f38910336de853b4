"""Deep learning on graphs: GNNGraph, message passing, graph layers and training."""

from .errors import (
    ContractError,
    DimensionError,
    DomainError,
    GNNError,
    GraphIndexError,
    NumericalError,
    ParseError,
    PrecisionError,
    ResourceError,
    ValidationError,
)
from .graph import (
    CsrView,
    GNNGraph,
    TemporalSnapshotsGNNGraph,
    add_self_loops,
    adjacency_dense,
    batch,
    degree,
    from_coo,
    rand_graph,
    snapshot_at,
    temporal_from_snapshots,
    to_csr,
    unbatch,
)
from .layers import (
    BatchNorm,
    Dense,
    GATConv,
    GCNConv,
    GINConv,
    GlobalPool,
    GNNChain,
    GraphConv,
    glorot_uniform,
    global_pool,
    parse_model,
)
from .message_passing import (
    aggregate_neighbors,
    apply_edges,
    copy_xj,
    e_mul_xj,
    edge_softmax,
    message,
    propagate,
    spmm_csr,
    w_mul_xj,
)
from .tensor import Tape, Tensor, backward, finite_diff_gradient, gradient
from .training import DataLoader, TrainConfig, adam_setup, adam_step, fit, make_synthetic_dataset, mse_loss

__version__ = "0.1.0"
