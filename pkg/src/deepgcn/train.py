"""Adam, staircase learning-rate decay, the training loop and evaluation."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import ParamStore, Tape
from .errors import ConfigError, NumericError
from .metrics import MetricsReport
from .model import DeepGCNModel, forward

TRACE_COLUMNS = ("step", "epoch", "lr", "loss", "oa", "miou", "mf1")


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 300_000
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        for name in ("decay_every", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


def lr_at(step: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay_factor ** (step // cfg.decay_every)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        st = cls(beta1, beta2, eps)
        for name, p in store.items(trainable_only=True):
            st.m[name] = np.zeros(p.shape, dtype=np.float64)
            st.v[name] = np.zeros(p.shape, dtype=np.float64)
        return st


def adam_step(store: ParamStore, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update; parameters without a gradient count as zero-gradient."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in store.items(trainable_only=True):
        g = np.zeros(p.shape) if p.grad is None else np.asarray(p.grad, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype)


def loss_fn(model: DeepGCNModel, logits, labels):
    if model.cfg.multilabel:
        return ops.bce_logits(logits, labels)
    return ops.softmax_xent(logits, labels)


@dataclass
class TrainResult:
    trace: list[dict]
    epoch_losses: list[float]
    diverged: bool = False
    best: MetricsReport | None = None
    best_epoch: int | None = None
    best_params: list | None = None
    steps: int = 0


def evaluate(model: DeepGCNModel, dataset, batch_size=8) -> MetricsReport:
    """Eval-mode predictions pooled over the whole dataset."""
    preds, labels, losses = [], [], []
    for batch in dataset.batches(batch_size, shuffle=False):
        logits = forward(model, batch, train=False)
        losses.append(float(loss_fn(model, logits, batch.labels).data))
        z = logits.data
        preds.append((z > 0).astype(np.int8) if model.cfg.multilabel else z.argmax(axis=1))
        labels.append(batch.labels)
    report = MetricsReport.from_predictions(np.concatenate(preds), np.concatenate(labels),
                                            model.cfg.num_classes, model.cfg.multilabel)
    report.loss_trace = [float(np.mean(losses))]
    return report


def train(model: DeepGCNModel, dataset, cfg: TrainConfig, eval_set=None, log=None) -> TrainResult:
    """Mini-batch training with per-epoch shuffling.

    Every random draw derives from ``cfg.seed`` and the (epoch, step)
    counters, so a rerun with the same inputs repeats the loss trace exactly.
    A non-finite loss or gradient stops training with ``diverged=True``.
    Evaluation runs every ``eval_every`` epochs and after the last one; the
    parameters of the best evaluation are kept in ``best_params``.
    """
    state = AdamState.for_store(model.store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    result = TrainResult(trace=[], epoch_losses=[])
    step = 0
    eval_set = eval_set if eval_set is not None else dataset
    for epoch in range(1, cfg.epochs + 1):
        shuffle_rng = np.random.default_rng([cfg.seed, 1, epoch])
        batch_losses = []
        lr = lr_at(step, cfg)
        for bi, batch in enumerate(dataset.batches(cfg.batch_size, shuffle_rng, shuffle=True)):
            lr = lr_at(step, cfg)
            rng = np.random.default_rng([cfg.seed, 2, epoch, bi])
            model.store.zero_grad()
            try:
                with Tape() as tape:
                    logits = forward(model, batch, train=True, rng=rng)
                    loss = loss_fn(model, logits, batch.labels)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise NumericError(f"non-finite loss {value}")
                    tape.backward(loss)
                _check_grads(model.store)
            except NumericError:
                result.diverged = True
                break
            adam_step(model.store, state, lr)
            step += 1
            batch_losses.append(value)
        if result.diverged:
            result.trace.append(_row(step, epoch, lr, float("nan")))
            break
        mean_loss = float(np.mean(batch_losses))
        result.epoch_losses.append(mean_loss)
        row = _row(step, epoch, lr, mean_loss)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            report = evaluate(model, eval_set, cfg.batch_size)
            row.update(oa=report.oa, miou=report.miou, mf1=report.mf1)
            if result.best is None or report.primary() > result.best.primary():
                result.best, result.best_epoch = report, epoch
                result.best_params = model.store.snapshot()
        result.trace.append(row)
        if log is not None:
            log(row)
    result.steps = step
    if result.best is not None:
        result.best.loss_trace = list(result.epoch_losses)
    return result


def _check_grads(store):
    for name, p in store.items(trainable_only=True):
        if p.grad is not None and not math.isfinite(p.grad.sum(dtype=np.float64)):
            raise NumericError(f"non-finite gradient for {name}")


def _row(step, epoch, lr, loss):
    return dict(step=step, epoch=epoch, lr=lr, loss=loss, oa=None, miou=None, mf1=None)


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def trace_csv(rows) -> str:
    out = io.StringIO()
    out.write(",".join(TRACE_COLUMNS) + "\n")
    for r in rows:
        out.write(",".join(_cell(r.get(c)) for c in TRACE_COLUMNS) + "\n")
    return out.getvalue()


def write_trace(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(trace_csv(rows))
