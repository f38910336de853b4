import subprocess
import sys

import numpy as np
import pytest

import minignn.cli as cli
import minignn.layers as layers
from minignn import gradcheck
from minignn.graph import rand_graph
from minignn.io import checkpoint_load, dataset_read, dataset_write
from minignn.tensor import record

SMALL = ["--num-graphs", "8", "--nodes", "6", "--edges", "10", "--batch-size", "4"]


def csv_rows(text):
    return [line.split(",") for line in text.strip().splitlines()]


def test_train_writes_csv_and_checkpoint(tmp_path, capsys):
    ckpt = tmp_path / "model.json"
    code = cli.main(["train", *SMALL, "--epochs", "3", "--checkpoint", str(ckpt)])
    assert code == 0
    rows = csv_rows(capsys.readouterr().out)
    assert rows[0] == ["epoch", "mean_loss", "wall_ms"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert all(np.isfinite(float(r[1])) for r in rows[1:])
    doc = checkpoint_load(ckpt)
    assert "1.running_mean" in doc["params"] and "0.weight" in doc["params"]


def test_train_zero_epochs_prints_header_only(tmp_path):
    out = tmp_path / "m.csv"
    assert cli.main(["train", *SMALL, "--epochs", "0", "--out", str(out)]) == 0
    assert out.read_text() == "epoch,mean_loss,wall_ms\n"


def test_train_loss_column_is_seed_deterministic(capsys):
    cli.main(["train", *SMALL, "--epochs", "2", "--paper-random-y"])
    a = [r[:2] for r in csv_rows(capsys.readouterr().out)]
    cli.main(["train", *SMALL, "--epochs", "2", "--paper-random-y"])
    b = [r[:2] for r in csv_rows(capsys.readouterr().out)]
    assert a == b
    cli.main(["train", *SMALL, "--epochs", "2"])
    c = [r[:2] for r in csv_rows(capsys.readouterr().out)]
    assert c != a


@pytest.mark.parametrize("argv", [
    ["train", "--lr", "-1"],
    ["train", "--epochs", "two"],
    ["train", "--model", "dense:16-2"],
    ["train", "--model", "gcn:16"],
    ["train", "--nodes", "3", "--edges", "7"],
    ["bench", "--nodes", "3", "--edges", "7"],
    ["gradcheck", "--layer", "sage"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_train_from_dataset_and_bad_dataset(tmp_path, capsys):
    path = tmp_path / "d.jsonl"
    assert cli.main(["make-dataset", *SMALL[:6], "--out", str(path)]) == 0
    assert len(dataset_read(path)) == 8
    assert cli.main(["train", *SMALL, "--epochs", "1", "--data", str(path)]) == 0
    path.write_text(path.read_text()[:100])
    capsys.readouterr()
    assert cli.main(["train", "--data", str(path), "--epochs", "1"]) == 1
    assert "line 1" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_non_finite_loss_exits_1(tmp_path, capsys):
    rng = np.random.default_rng(0)
    graphs = [rand_graph(4, 3, rng, ndata={"x": rng.standard_normal((16, 4)).astype(np.float32)},
                         gdata={"y": np.array([1e30], dtype=np.float32)}) for _ in range(4)]
    path = tmp_path / "huge.jsonl"
    dataset_write(path, graphs)
    assert cli.main(["train", "--data", str(path), "--epochs", "2"]) == 1
    assert "epoch 1, batch 1" in capsys.readouterr().err


def test_bench_csv(tmp_path):
    out = tmp_path / "b.csv"
    code = cli.main(["bench", "--nodes", "40,60", "--edges", "100", "--feature-dim", "4",
                     "--reps", "1", "--warmup", "0", "--threads", "2", "--out", str(out)])
    assert code == 0
    rows = csv_rows(out.read_text())
    assert rows[0] == ["n", "m", "d", "fused_us", "unfused_us", "speedup"]
    assert [r[:3] for r in rows[1:]] == [["40", "100", "4"], ["60", "100", "4"]]
    for r in rows[1:]:
        f, u, s = map(float, r[3:])
        assert f > 0 and u > 0
        assert s == pytest.approx(u / f, rel=1e-3)


def test_bench_refuses_to_time_disagreeing_paths(monkeypatch, capsys):
    real = cli.propagate

    def skewed(*args, fuse=None, **kw):
        out = real(*args, fuse=fuse, **kw)
        return out * 1.01 if fuse else out

    monkeypatch.setattr(cli, "propagate", skewed)
    assert cli.main(["bench", "--nodes", "30", "--edges", "60", "--feature-dim", "3", "--reps", "1"]) == 1
    captured = capsys.readouterr()
    assert captured.out == ""
    assert "max rel diff" in captured.err


def test_gradcheck_single_layer(capsys):
    assert cli.main(["gradcheck", "--layer", "graphconv", "--num-graphs", "5"]) == 0
    rows = csv_rows(capsys.readouterr().out)
    assert rows[0] == ["layer", "max_rel_err", "worst_param", "instances", "status"]
    assert len(rows) == 2 and rows[1][0] == "graphconv" and rows[1][-1] == "ok"
    assert rows[1][3] == "5"


def test_gradcheck_catches_wrong_backward(monkeypatch, capsys):
    def bad_add_bias(x, b):
        out = x.data + b.data[:, None]
        return record("add_bias", out, (x, b), lambda g: (g, 0.5 * g.sum(axis=1)))

    monkeypatch.setattr(layers, "add_bias", bad_add_bias)
    assert cli.main(["gradcheck", "--layer", "dense", "--num-graphs", "3"]) == 1
    captured = capsys.readouterr()
    assert "FAIL" in captured.out
    assert "dense" in captured.err and "bias" in captured.err


def test_gradcheck_layer_kinds_cover_suite():
    assert len(gradcheck.LAYER_KINDS) >= 6


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "minignn", "train", *SMALL, "--epochs", "1"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("epoch,mean_loss,wall_ms\n1,")
