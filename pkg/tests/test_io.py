import json

import numpy as np
import pytest

from minignn.errors import ParseError, ValidationError
from minignn.graph import GNNGraph, rand_graph
from minignn.io import checkpoint_load, checkpoint_save, dataset_read, dataset_write, graph_from_json
from minignn.layers import parse_model
from minignn.tensor import Tensor
from minignn.training import TrainConfig, make_synthetic_dataset


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    model = parse_model("gcn:4-8, batchnorm:8, relu, pool:mean, dense:8-1", rng)
    model.load_parameters({"1.running_mean": rng.standard_normal(8)})
    state = model.state_dict()
    state["extra64"] = Tensor(rng.standard_normal((3, 2)) * 1e-300)
    path = tmp_path / "ckpt.json"
    checkpoint_save(path, state, model="gcn:4-8")
    doc = checkpoint_load(path)
    assert doc["format_version"] == 1 and doc["model"] == "gcn:4-8"
    assert set(doc["params"]) == set(state)
    for k, v in state.items():
        got = doc["params"][k]
        assert got.dtype == v.dtype and got.shape == v.shape
        assert np.array_equal(got.data, v.data)
    assert "1.running_var" in doc["params"]


def test_checkpoint_loads_into_fresh_model(tmp_path):
    a = parse_model("dense:3-2", 1)
    b = parse_model("dense:3-2", 2)
    checkpoint_save(tmp_path / "c.json", a.state_dict())
    b.load_parameters(checkpoint_load(tmp_path / "c.json")["params"], strict=True)
    x = Tensor(np.ones((3, 4)), dtype=np.float32)
    assert np.array_equal(a(None, x).data, b(None, x).data)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.json"
    checkpoint_save(path, {"w": Tensor(np.ones(3))})
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(ParseError, match="line 1 column"):
        checkpoint_load(path)
    path.write_text(json.dumps({"format_version": 2, "params": {}}))
    with pytest.raises(ParseError, match="format_version"):
        checkpoint_load(path)
    path.write_text(json.dumps({"format_version": 1, "params": {"w": {"shape": [2, 2], "data": [1.0]}}}))
    with pytest.raises(ValidationError, match="params.w"):
        checkpoint_load(path)


def test_dataset_round_trip(tmp_path):
    cfg = TrainConfig(num_graphs=6, nodes=5, edges=7)
    graphs = make_synthetic_dataset(cfg)
    rng = np.random.default_rng(3)
    graphs.append(GNNGraph([0, 1], [1, 1], 3, edge_weight=[0.1, 1 / 3],
                           edata={"e": rng.standard_normal((2, 2))}, ndata={"x": rng.standard_normal((16, 3))},
                           gdata={"y": [0.5]}))
    path = tmp_path / "d.jsonl"
    dataset_write(path, graphs)
    back = dataset_read(path)
    assert back == graphs
    assert back[0].x.dtype == np.float32


def test_dataset_reader_accepts_documented_layout(tmp_path):
    line = {"num_nodes": 2, "sources": [0], "targets": [1], "edge_weight": None,
            "ndata": {"x": {"shape": [1, 2], "data": [1.5, 2.5]}}, "edata": {},
            "gdata": {"y": {"shape": [1], "data": [3.0]}}}
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(line) + "\n\n")
    (g,) = dataset_read(path)
    assert g.x.data.tolist() == [[1.5, 2.5]] and g.x.dtype == np.float64
    assert g.y.data.tolist() == [3.0]


def test_dataset_bad_index_cites_line(tmp_path):
    graphs = [rand_graph(4, 3, s) for s in range(3)]
    path = tmp_path / "d.jsonl"
    dataset_write(path, graphs)
    lines = path.read_text().splitlines()
    bad = json.loads(lines[2])
    bad["targets"][0] = 9
    lines[2] = json.dumps(bad)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match="line 3"):
        dataset_read(path)


def test_dataset_parse_errors(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"num_nodes": 1, "sources": [], "targets": []}) + "\n{\"num_nodes\": 2,\n")
    with pytest.raises(ParseError, match="line 2"):
        dataset_read(path)
    for obj, field in (({"sources": [], "targets": []}, "num_nodes"),
                       ({"num_nodes": 1, "sources": [0.5], "targets": [0]}, "sources"),
                       ({"num_nodes": 1, "sources": [], "targets": [], "ndata": {"x": [1]}}, "ndata.x")):
        with pytest.raises(ParseError, match=field):
            graph_from_json(obj)
    with pytest.raises(ValidationError, match="'x'"):
        graph_from_json({"num_nodes": 2, "sources": [], "targets": [],
                         "ndata": {"x": {"shape": [1, 3], "data": [1, 2, 3]}}})


def test_dataset_rejects_batched_graph(tmp_path):
    from minignn.graph import batch

    with pytest.raises(ValidationError):
        dataset_write(tmp_path / "d.jsonl", [batch([rand_graph(2, 1, 0), rand_graph(2, 1, 1)])])
