"""Checkpoint JSON and graph dataset JSON Lines readers/writers.

Floats are written as decimal doubles (Python's shortest round-trip repr), so
single and double precision values survive a save/load cycle bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from .errors import GNNError, ParseError, ValidationError
from .graph import GNNGraph
from .tensor import Tensor

FORMAT_VERSION = 1
PathLike = Union[str, Path]

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _encode_tensor(t: Tensor, with_dtype: bool = True) -> dict:
    out = {"shape": list(t.shape), "data": t.data.astype(np.float64).reshape(-1).tolist()}
    if with_dtype:
        out["dtype"] = str(t.dtype)
    return out


def _decode_tensor(obj, where: str, default_dtype=np.float64) -> Tensor:
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise ParseError(f"{where}: expected an object with 'shape' and 'data'")
    shape, data = obj["shape"], obj["data"]
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise ParseError(f"{where}: 'shape' must be a list of non-negative integers")
    if not isinstance(data, list):
        raise ParseError(f"{where}: 'data' must be a list of numbers")
    dtype = obj.get("dtype")
    if dtype is not None and dtype not in _DTYPES:
        raise ParseError(f"{where}: unsupported dtype {dtype!r}")
    try:
        arr = np.array(data, dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: 'data' must hold numbers only") from None
    if arr.ndim != 1 or arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValidationError(f"{where}: {arr.size} values do not fill shape {shape}")
    return Tensor(arr.reshape(shape), dtype=_DTYPES[dtype] if dtype else default_dtype)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_save(path: PathLike, params: Mapping[str, Tensor], model: Optional[str] = None):
    doc = {"format_version": FORMAT_VERSION}
    if model is not None:
        doc["model"] = model
    doc["params"] = {k: _encode_tensor(v) for k, v in params.items()}
    Path(path).write_text(json.dumps(doc))


def checkpoint_load(path: PathLike) -> dict:
    """Returns ``{"format_version", "params", "model"}`` with params as tensors."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(f"{path}: line {err.lineno} column {err.colno}: {err.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: checkpoint must be a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{path}: field 'format_version' must be {FORMAT_VERSION}, got {doc.get('format_version')!r}")
    raw = doc.get("params")
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: field 'params' must be an object")
    params = {k: _decode_tensor(v, f"{path}: params.{k}") for k, v in raw.items()}
    return {"format_version": FORMAT_VERSION, "params": params, "model": doc.get("model")}


# ---------------------------------------------------------------------------
# datasets


def graph_to_json(g: GNNGraph) -> dict:
    return {
        "num_nodes": g.num_nodes,
        "sources": g.sources.tolist(),
        "targets": g.targets.tolist(),
        "edge_weight": None if g.edge_weight is None else g.edge_weight.data.astype(np.float64).tolist(),
        "ndata": {k: _encode_tensor(v) for k, v in g.ndata.items()},
        "edata": {k: _encode_tensor(v) for k, v in g.edata.items()},
        "gdata": {k: _encode_tensor(v) for k, v in g.gdata.items()},
    }


def graph_from_json(obj, where: str = "graph") -> GNNGraph:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected a JSON object")
    for key in ("num_nodes", "sources", "targets"):
        if key not in obj:
            raise ParseError(f"{where}: missing field {key!r}")
    n = obj["num_nodes"]
    if not isinstance(n, int) or isinstance(n, bool):
        raise ParseError(f"{where}: field 'num_nodes' must be an integer")
    for key in ("sources", "targets"):
        v = obj[key]
        if not isinstance(v, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in v):
            raise ParseError(f"{where}: field {key!r} must be a list of integers")
    stores = {}
    for level in ("ndata", "edata", "gdata"):
        raw = obj.get(level) or {}
        if not isinstance(raw, dict):
            raise ParseError(f"{where}: field {level!r} must be an object")
        stores[level] = {k: _decode_tensor(v, f"{where}: {level}.{k}") for k, v in raw.items()}
    w = obj.get("edge_weight")
    if w is not None:
        if not isinstance(w, list):
            raise ParseError(f"{where}: field 'edge_weight' must be a list or null")
        try:
            w = np.array(w, dtype=np.float64)
        except (TypeError, ValueError):
            raise ParseError(f"{where}: field 'edge_weight' must hold numbers") from None
    try:
        return GNNGraph(obj["sources"], obj["targets"], n, edge_weight=w, **stores)
    except GNNError as err:
        raise ValidationError(f"{where}: {err}") from None


def dataset_write(path: PathLike, graphs: Iterable[GNNGraph]):
    with open(path, "w") as fh:
        for g in graphs:
            if g.num_graphs != 1:
                raise ValidationError("dataset files hold one graph per line; unbatch first")
            fh.write(json.dumps(graph_to_json(g)))
            fh.write("\n")


def dataset_read(path: PathLike) -> list[GNNGraph]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"{path}: line {lineno} column {err.colno}: {err.msg}") from None
            out.append(graph_from_json(obj, f"{path}: line {lineno}"))
    return out
