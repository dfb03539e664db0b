"""Experiment drivers shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import config as cfgtext
from .data import PointCloudDataset, gen_synthetic_parts
from .graph import GraphBatch, feature_diversity
from .knn import DilationPlan, clamp_dilation, dilated_knn, knn_bruteforce
from .model import ModelConfig, backbone_forward, build_model
from .train import TrainConfig, TrainResult, evaluate, train, write_trace


# --------------------------------------------------------------------------
# depth sweep


@dataclass
class SweepCell:
    connection: str
    depth: int
    result: TrainResult
    smooth: int = 5

    @property
    def diverged(self) -> bool:
        return self.result.diverged

    @property
    def smoothed_loss(self) -> float:
        losses = self.result.epoch_losses
        if self.diverged or not losses:
            return math.inf
        return float(np.mean(losses[-self.smooth:]))


def run_depth_sweep(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset, depths, connections,
                    out_dir=None, smooth=5, log=None) -> list[SweepCell]:
    """Train every (connection, depth) cell with otherwise identical settings."""
    cells = []
    for conn in connections:
        for depth in depths:
            cfg = replace(model_cfg, connection=conn, depth=int(depth))
            model = build_model(cfg, train_cfg.seed)
            result = train(model, dataset, train_cfg)
            cell = SweepCell(conn, int(depth), result, smooth)
            cells.append(cell)
            if out_dir is not None:
                cell_dir = Path(out_dir) / f"{conn}-{depth}"
                cell_dir.mkdir(parents=True, exist_ok=True)
                write_trace(result.trace, cell_dir / "metrics.csv")
            if log is not None:
                log(cell)
    if out_dir is not None:
        write_sweep_csv(cells, Path(out_dir))
    return cells


def write_sweep_csv(cells, out_dir: Path) -> None:
    """``sweep.csv`` has one row per epoch per cell; ``sweep_final.csv`` one row per cell."""
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["connection", "depth", "epoch", "loss", "sqrt_loss"])
        for c in cells:
            for e, loss in enumerate(c.result.epoch_losses, start=1):
                w.writerow([c.connection, c.depth, e, f"{loss:.9g}", f"{math.sqrt(loss):.9g}"])
    with open(out_dir / "sweep_final.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["connection", "depth", "epochs", "diverged", "final_loss", "smoothed_loss",
                    "sqrt_smoothed_loss"])
        for c in cells:
            losses = c.result.epoch_losses
            final = f"{losses[-1]:.9g}" if losses and not c.diverged else "-"
            sm = "-" if c.diverged else f"{c.smoothed_loss:.9g}"
            sq = "-" if c.diverged else f"{math.sqrt(c.smoothed_loss):.9g}"
            w.writerow([c.connection, c.depth, len(losses), int(c.diverged), final, sm, sq])


def read_sweep_final(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            loss = math.inf if row["smoothed_loss"] == "-" else float(row["smoothed_loss"])
            out[(row["connection"], int(row["depth"]))] = (loss, bool(int(row["diverged"])))
    return out


def depth_ordering(table: dict, shallow: int, deep: int, res_slack=1.1, plain_factor=1.5) -> dict:
    """Check the residual/plain depth ordering on {(connection, depth): (loss, diverged)}."""
    res_s, res_d = table[("res", shallow)], table[("res", deep)]
    pl_s, pl_d = table[("plain", shallow)], table[("plain", deep)]
    res_ok = not res_d[1] and res_d[0] <= res_s[0] * res_slack
    plain_ok = pl_d[1] or pl_d[0] >= pl_s[0] * plain_factor
    res_never = not any(div for (conn, _), (_, div) in table.items() if conn == "res")
    return dict(res_deep_ok=res_ok, plain_deep_worse=plain_ok, res_never_diverged=res_never,
                passed=res_ok and plain_ok and res_never)


@dataclass
class ConvergenceSetup:
    """Desk-scale plain/res depth comparison on synthetic part clouds.

    The kNN graph is built once from coordinates so that every cell sees the
    same edges, and the fusion/head widths are reduced to keep a 56-layer
    cell within CPU budget; the backbone width and k are the usual ones.
    """

    samples: int = 512
    points: int = 512
    epochs: int = 30
    batch_size: int = 16
    depths: tuple[int, ...] = (7, 28, 56)
    connections: tuple[str, ...] = ("plain", "res")
    seed: int = 0
    smooth: int = 5
    width: int = 32
    k: int = 8
    fusion_width: int = 128
    head_widths: tuple[int, ...] = (64, 32)

    def model_config(self) -> ModelConfig:
        return ModelConfig(in_channels=3, width=self.width, k=self.k, operator="mrgcn", dynamic_knn=False,
                           num_classes=3, fusion_width=self.fusion_width, head_widths=self.head_widths)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed, eval_every=10**6)

    def text(self) -> str:
        return cfgtext.to_text({"setup": self, "model": self.model_config(), "train": self.train_config()})


def convergence_sweep(setup: ConvergenceSetup, out_dir=None, reuse=False, log=None) -> dict:
    """Run (or, with ``reuse``, reload) the sweep; returns {(connection, depth): (loss, diverged)}.

    A previous result is reused only if ``setup.ini`` in ``out_dir`` matches
    this setup exactly.
    """
    out = Path(out_dir) if out_dir is not None else None
    if reuse and out is not None and (out / "setup.ini").exists() and (out / "sweep_final.csv").exists():
        if (out / "setup.ini").read_text() == setup.text():
            return read_sweep_final(out / "sweep_final.csv")
    data = PointCloudDataset(gen_synthetic_parts(setup.points, setup.samples, seed=setup.seed), num_classes=3)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "setup.ini").unlink(missing_ok=True)
    cells = run_depth_sweep(setup.model_config(), setup.train_config(), data, setup.depths, setup.connections,
                            out, setup.smooth, log)
    if out is not None:
        (out / "setup.ini").write_text(setup.text())
    return {(c.connection, c.depth): (c.smoothed_loss, c.diverged) for c in cells}


# --------------------------------------------------------------------------
# end-to-end learnability


@dataclass
class LearnabilitySetup:
    """A 2-part segmentation task trained with the full dynamic dilated model.

    The score is the eval-mode mIoU on the training shapes; a held-out set of
    ``eval_shapes`` is scored with the same parameters for reference.
    """

    parts: tuple[str, ...] = ("sphere", "box")
    points: int = 256
    train_shapes: int = 48
    eval_shapes: int = 16
    depth: int = 14
    width: int = 32
    k: int = 8
    epochs: int = 100
    batch_size: int = 8
    lr0: float = 1e-3
    eval_every: int = 5
    seed: int = 0
    fusion_width: int = 256
    head_widths: tuple[int, ...] = (128, 64)

    def model_config(self, connection: str) -> ModelConfig:
        return ModelConfig(in_channels=3, depth=self.depth, width=self.width, k=self.k, operator="mrgcn",
                           connection=connection, num_classes=len(self.parts), fusion_width=self.fusion_width,
                           head_widths=self.head_widths)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr0=self.lr0, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                           eval_every=self.eval_every)

    def datasets(self):
        samples = gen_synthetic_parts(self.points, self.train_shapes + self.eval_shapes, self.seed, self.parts)
        c = len(self.parts)
        return (PointCloudDataset(samples[:self.train_shapes], c),
                PointCloudDataset(samples[self.train_shapes:], c))


@dataclass
class LearnabilityResult:
    result: TrainResult
    train_miou: float | None
    heldout_miou: float | None
    seconds: float


def learnability(setup: LearnabilitySetup, connection="res", log=None) -> LearnabilityResult:
    train_set, held = setup.datasets()
    model = build_model(setup.model_config(connection), setup.seed)
    t0 = time.perf_counter()
    result = train(model, train_set, setup.train_config(), train_set, log)
    seconds = time.perf_counter() - t0
    if result.best is None:
        return LearnabilityResult(result, None, None, seconds)
    model.store.restore(result.best_params)
    return LearnabilityResult(result, result.best.miou, evaluate(model, held, setup.batch_size).miou, seconds)


# --------------------------------------------------------------------------
# dilated k-NN oracle


def oracle_dilated(points, k, d) -> np.ndarray:
    """Sort every other vertex by (distance, id) and keep positions 0, d, ..., (k-1)d."""
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    d = clamp_dilation(n, k, d)
    out = np.empty((n, k), dtype=np.int64)
    for v in range(n):
        dist = ((x - x[v]) ** 2).sum(axis=1)
        others = sorted((float(dist[u]), u) for u in range(n) if u != v)
        out[v] = [others[j * d][1] for j in range(k)]
    return out


@dataclass
class KnnCheckReport:
    trials: int
    mismatches: int
    d1_equals_knn: bool
    random_fraction: float
    deterministic_seed_independent: bool

    @property
    def passed(self) -> bool:
        return (self.mismatches == 0 and self.d1_equals_knn and self.deterministic_seed_independent
                and 0.18 <= self.random_fraction <= 0.22)


def knn_check(max_n=200, trials=100, seed=0, epsilon=0.2, stat_rows=10_000) -> KnnCheckReport:
    rng = np.random.default_rng([seed, 0])
    ks, ds = (4, 8, 16), (1, 2, 4)
    mismatches = 0
    d1_ok = True
    for t in range(trials):
        k = ks[t % 3]
        d = ds[(t // 3) % 3]
        n = int(rng.integers(k * d + 1, max_n + 1)) if k * d + 1 <= max_n else max_n
        dim = int(rng.choice([2, 3, 16]))
        pts = rng.random((n, dim))
        got = dilated_knn(pts, DilationPlan(k, d, deterministic=True)).indices
        mismatches += int(np.any(got != oracle_dilated(pts, k, d)))
        if d == 1:
            d1_ok &= bool(np.array_equal(got, knn_bruteforce(pts, k).indices))
    # stochastic branch frequency over stat_rows row draws
    pts = rng.random((stat_rows, 3))
    plan = DilationPlan(4, 2, epsilon)
    _, rows = dilated_knn(pts, plan, np.random.default_rng([seed, 1]), return_random_rows=True)
    frac = float(np.mean(rows))
    small = rng.random((150, 3))
    det = DilationPlan(8, 2, epsilon, deterministic=True)
    a = dilated_knn(small, det, np.random.default_rng(1)).indices
    b = dilated_knn(small, det, np.random.default_rng(2)).indices
    return KnnCheckReport(trials, mismatches, d1_ok, frac, bool(np.array_equal(a, b)))


# --------------------------------------------------------------------------
# over-smoothing diagnostic


def diversity_by_depth(connection, depths, n=256, k=8, width=32, seed=0, operator="mean") -> dict:
    """feature_diversity of untrained eval-mode backbones on one fixed random graph."""
    rng = np.random.default_rng([seed, 0])
    feats = rng.normal(size=(n, width)).astype(np.float32)
    table = knn_bruteforce(rng.random((n, 3)), k)
    batch = GraphBatch(feats, np.array([0, n]), table)
    out = {}
    for depth in depths:
        cfg = ModelConfig(in_channels=width, depth=depth, width=width, k=k, operator=operator,
                          connection=connection, dynamic_knn=False, fixed_edges=True, stem=False,
                          num_classes=2, fusion_width=8, head_widths=(8, 8))
        model = build_model(cfg, np.random.default_rng([seed, 1]))
        h, _ = backbone_forward(model, batch, train=False)
        out[depth] = feature_diversity(h)
    return out


__all__ = [
    "SweepCell", "run_depth_sweep", "write_sweep_csv", "read_sweep_final", "depth_ordering",
    "ConvergenceSetup", "convergence_sweep", "LearnabilitySetup", "LearnabilityResult", "learnability",
    "oracle_dilated", "KnnCheckReport", "knn_check", "diversity_by_depth",
]
