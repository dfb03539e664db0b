"""Operator memory and speed benchmark on a shared graph instance."""

from __future__ import annotations

import csv
import io
import time
import tracemalloc
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ops
from .autodiff import ParamStore, Tape, Tensor
from .graph import Graph, add_features
from .knn import knn_bruteforce
from .layers import OperatorKind, apply_layer, build_layer


@dataclass
class BenchConfig:
    operators: tuple[str, ...] = ("mrgcn", "edgeconv")
    n: int = 1024
    k: int = 6
    width: int = 64
    depth: int = 14
    seed: int = 0
    repeats: int = 1


@dataclass
class BenchRow:
    operator: str
    n: int
    k: int
    width: int
    depth: int
    params: int
    saved_scalars: int
    peak_bytes: int
    forward_s: float
    backward_s: float
    score: float | None = None


def bench_graph(cfg: BenchConfig):
    """Random features and their coordinate k-NN table, identical for every operator."""
    rng = np.random.default_rng([cfg.seed, 0])
    coords = rng.random((cfg.n, 3))
    feats = rng.normal(size=(cfg.n, cfg.width)).astype(np.float32)
    return feats, knn_bruteforce(coords, cfg.k)


def _run_once(kind, cfg, feats, table):
    store = ParamStore()
    rng = np.random.default_rng([cfg.seed, 1])
    layers = [build_layer(kind, cfg.width, cfg.width, store, f"l{i}", rng) for i in range(cfg.depth)]
    x = Tensor(feats)
    tracemalloc.start()
    t0 = time.perf_counter()
    with Tape() as tape:
        h = x
        for params in layers:
            h = add_features(apply_layer(Graph(h, table), params, train=True), h)
        loss = ops.mean_axis(ops.reshape(h, (h.size,)), 0)
        t1 = time.perf_counter()
        saved = tape.peak_saved_scalars
        tape.backward(loss)
    t2 = time.perf_counter()
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return BenchRow(OperatorKind.parse(kind).value, cfg.n, cfg.k, cfg.width, cfg.depth, store.count(),
                    saved, peak, t1 - t0, t2 - t1)


def bench_operators(cfg: BenchConfig) -> list[BenchRow]:
    """Residual stacks of each operator, forward + backward on the same graph.

    ``saved_scalars`` is the tape's peak count of activation scalars held for
    backward; ``peak_bytes`` is the traced allocation peak over the step.
    Wall times are the minimum over ``repeats`` runs.
    """
    feats, table = bench_graph(cfg)
    # load compiled kernels once so the first operator is not charged for it
    tiny = BenchConfig(cfg.operators, n=2 * cfg.k + 2, k=cfg.k, width=cfg.width, depth=1, seed=cfg.seed)
    tiny_feats, tiny_table = bench_graph(tiny)
    for kind in cfg.operators:
        _run_once(kind, tiny, tiny_feats, tiny_table)
    rows = []
    for kind in cfg.operators:
        runs = [_run_once(kind, cfg, feats, table) for _ in range(max(1, cfg.repeats))]
        best = runs[0]
        best.forward_s = min(r.forward_s for r in runs)
        best.backward_s = min(r.backward_s for r in runs)
        rows.append(best)
    return rows


def rows_csv(rows) -> str:
    out = io.StringIO()
    names = [f.name for f in fields(BenchRow)]
    w = csv.writer(out, lineterminator="\n")
    w.writerow(names)
    for r in rows:
        d = asdict(r)
        w.writerow(["-" if d[n] is None else (f"{d[n]:.6g}" if isinstance(d[n], float) else d[n])
                    for n in names])
    return out.getvalue()
