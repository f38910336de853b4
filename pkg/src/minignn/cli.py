"""Command-line entry point: train, bench, gradcheck, make-dataset.

Exit codes: 0 success, 1 numerical or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import itertools
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from . import gradcheck
from .errors import ContractError, GNNError, NumericalError, ParseError, ValidationError
from .graph import rand_graph
from .io import checkpoint_save, dataset_read, dataset_write
from .layers import DEFAULT_MODEL
from .message_passing import copy_xj, propagate
from .tensor import Tensor
from .training import TrainConfig, build_model, fit, make_synthetic_dataset

GRADCHECK_TOL = 1e-5
BENCH_TOL = 1e-6


def _positive_int(s: str) -> int:
    v = _nonneg_int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s!r}")
    return v


def _nonneg_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {s!r}")
    return v


def _nonneg_float(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {s!r}") from None
    if not v >= 0 or v == float("inf"):
        raise argparse.ArgumentTypeError(f"expected a finite non-negative number, got {s!r}")
    return v


def _int_list(s: str) -> list[int]:
    try:
        vals = [int(p) for p in s.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {s!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minignn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p):
        p.add_argument("--num-graphs", type=_positive_int, default=128)
        p.add_argument("--nodes", type=_nonneg_int, default=10)
        p.add_argument("--edges", type=_nonneg_int, default=30)
        p.add_argument("--feature-dim", type=_positive_int, default=16)
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--paper-random-y", action="store_true",
                       help="targets drawn independently of the features")

    t = sub.add_parser("train", help="train the example model and print CSV metrics")
    data_flags(t)
    t.add_argument("--batch-size", type=_positive_int, default=32)
    t.add_argument("--lr", type=_nonneg_float, default=1e-4)
    t.add_argument("--epochs", type=_nonneg_int, default=100)
    t.add_argument("--model", default=None, help=f"layer list, default {DEFAULT_MODEL!r}")
    t.add_argument("--data", default=None, help="read graphs from a JSONL dataset instead of generating them")
    t.add_argument("--out", default=None, help="metrics CSV path (default stdout)")
    t.add_argument("--checkpoint", default=None, help="write trained parameters here")

    d = sub.add_parser("make-dataset", help="write a synthetic dataset as JSONL")
    data_flags(d)
    d.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="time fused vs two-step propagate")
    b.add_argument("--nodes", type=_int_list, default=[1000])
    b.add_argument("--edges", type=_int_list, default=[5000])
    b.add_argument("--feature-dim", type=_int_list, default=[64])
    b.add_argument("--reps", type=_positive_int, default=20)
    b.add_argument("--warmup", type=_nonneg_int, default=3)
    b.add_argument("--seed", type=int, default=1)
    b.add_argument("--threads", type=_positive_int, default=1)
    b.add_argument("--out", default=None)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    g.add_argument("--layer", choices=gradcheck.LAYER_KINDS, action="append", default=None)
    g.add_argument("--num-graphs", type=_positive_int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None)
    return parser


class _Output:
    def __init__(self, path: Optional[str]):
        self.fh = open(path, "w") if path else sys.stdout

    def line(self, text: str):
        self.fh.write(text + "\n")
        self.fh.flush()

    def close(self):
        if self.fh is not sys.stdout:
            self.fh.close()


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, lr=args.lr, batchsize=args.batch_size, num_graphs=args.num_graphs,
        nodes=args.nodes, edges=args.edges, feature_dim=args.feature_dim, seed=args.seed,
        model=args.model or DEFAULT_MODEL, paper_random_y=args.paper_random_y,
    )


def cmd_train(args, parser) -> int:
    try:
        cfg = _train_config(args)
        model = build_model(cfg)
        data = dataset_read(args.data) if args.data else make_synthetic_dataset(cfg)
    except (ParseError, ValidationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ContractError, GNNError) as err:
        parser.error(str(err))
    out = _Output(args.out)
    out.line("epoch,mean_loss,wall_ms")
    try:
        result = fit(model, data, cfg, on_epoch=lambda m: out.line(m.csv()))
    except NumericalError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except GNNError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    finally:
        out.close()
    if args.checkpoint:
        checkpoint_save(args.checkpoint, model.state_dict(), model=cfg.model)
    if result.metrics and not np.isfinite(result.metrics[-1].mean_loss):
        return 1
    return 0


def cmd_make_dataset(args, parser) -> int:
    try:
        cfg = TrainConfig(num_graphs=args.num_graphs, nodes=args.nodes, edges=args.edges,
                          feature_dim=args.feature_dim, seed=args.seed, paper_random_y=args.paper_random_y)
        data = make_synthetic_dataset(cfg)
    except ContractError as err:
        parser.error(str(err))
    dataset_write(args.out, data)
    return 0


def _time_us(fn, reps: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e6


def bench_point(n: int, m: int, d: int, reps: int, warmup: int, seed: int):
    """Time one grid point. Returns ``(fused_us, unfused_us, max_rel_diff)``."""
    rng = np.random.default_rng([seed, n, m, d])
    g = rand_graph(n, m, rng)
    x = Tensor(rng.standard_normal((d, n)), dtype=np.float32)
    fused = propagate(copy_xj, g, "sum", xj=x, fuse=True)
    unfused = propagate(copy_xj, g, "sum", xj=x, fuse=False)
    diff = float(np.abs(fused.data - unfused.data).max(initial=0.0))
    diff /= max(1.0, float(np.abs(unfused.data).max(initial=0.0)))
    if not diff < BENCH_TOL:
        return None, None, diff
    fused_us = _time_us(lambda: propagate(copy_xj, g, "sum", xj=x, fuse=True), reps, warmup)
    unfused_us = _time_us(lambda: propagate(copy_xj, g, "sum", xj=x, fuse=False), reps, warmup)
    return fused_us, unfused_us, diff


def cmd_bench(args, parser) -> int:
    grid = [(n, m, d) for n, m, d in itertools.product(args.nodes, args.edges, args.feature_dim)]
    for n, m, _ in grid:
        if m > n * (n - 1):
            parser.error(f"--edges {m} exceeds the {n * (n - 1)} possible edges on {n} nodes")

    def run(point):
        return bench_point(*point, args.reps, args.warmup, args.seed)

    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            results = list(pool.map(run, grid))
    else:
        results = [run(p) for p in grid]

    bad = [(p, r[2]) for p, r in zip(grid, results) if r[0] is None]
    if bad:
        for (n, m, d), diff in bad:
            print(f"error: fused and two-step propagate disagree at n={n} m={m} d={d}: "
                  f"max rel diff {diff:.3e}", file=sys.stderr)
        return 1
    out = _Output(args.out)
    out.line("n,m,d,fused_us,unfused_us,speedup")
    for (n, m, d), (f_us, u_us, _) in zip(grid, results):
        out.line(f"{n},{m},{d},{f_us:.3f},{u_us:.3f},{u_us / f_us:.4f}")
    out.close()
    return 0


def cmd_gradcheck(args, parser) -> int:
    reports = gradcheck.run_suite(args.layer, instances=args.num_graphs, seed=args.seed)
    out = _Output(args.out)
    out.line("layer,max_rel_err,worst_param,instances,status")
    failed = []
    for r in reports:
        ok = r.max_rel_err < GRADCHECK_TOL
        if not ok:
            failed.append(r)
        out.line(f"{r.layer},{r.max_rel_err:.3e},{r.worst},{r.instances},{'ok' if ok else 'FAIL'}")
    out.close()
    for r in failed:
        print(f"error: {r.layer} gradient of {r.worst} off by {r.max_rel_err:.3e} (tolerance {GRADCHECK_TOL})",
              file=sys.stderr)
    return 1 if failed else 0


COMMANDS = {
    "train": cmd_train,
    "make-dataset": cmd_make_dataset,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    return COMMANDS[args.command](args, sub)


if __name__ == "__main__":
    sys.exit(main())
