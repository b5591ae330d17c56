"""Adam optimiser, the training loop, and open/closed/overall evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import EncodedDataset
from .model import VqaModel, batch_logits, predict_from_logits
from .tensor import Parameter, ShapeError

log = logging.getLogger(__name__)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    best_val_acc: float = -1.0
    best_epoch: int = -1
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in
                ("step", "epoch", "lr", "beta1", "beta2", "eps", "seed", "best_val_acc", "best_epoch")}


def adam_step(params: list[Parameter], state: TrainState, lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place, using each parameter's ``grad``."""
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        g = p.grad
        if g is None:
            continue
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        if g.shape != m.shape or m.shape != p.shape:
            raise ShapeError(f"{p.name}: grad {g.shape} / moment {m.shape} / param {p.shape} mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EvalReport:
    n_open: int
    n_closed: int
    correct_open: int
    correct_closed: int
    confusion: np.ndarray  # (C, C) counts, rows = truth, cols = prediction

    @property
    def open_acc(self) -> float | None:
        return self.correct_open / self.n_open if self.n_open else None

    @property
    def closed_acc(self) -> float | None:
        return self.correct_closed / self.n_closed if self.n_closed else None

    @property
    def overall_acc(self) -> float:
        n = self.n_open + self.n_closed
        return (self.correct_open + self.correct_closed) / n if n else float("nan")

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.n_open + other.n_open, self.n_closed + other.n_closed,
                          self.correct_open + other.correct_open, self.correct_closed + other.correct_closed,
                          self.confusion + other.confusion)

    def row(self) -> dict:
        def fmt(x):
            return "" if x is None else f"{x:.6f}"
        return {"open_acc": fmt(self.open_acc), "closed_acc": fmt(self.closed_acc),
                "overall_acc": fmt(self.overall_acc), "n_open": self.n_open, "n_closed": self.n_closed}


def report_from_predictions(pred: np.ndarray, truth: np.ndarray, closed: np.ndarray, n_classes: int) -> EvalReport:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    closed = np.asarray(closed, dtype=bool)
    hit = pred == truth
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    return EvalReport(int((~closed).sum()), int(closed.sum()), int(hit[~closed].sum()), int(hit[closed].sum()), conf)


def evaluate(model: VqaModel, ds: EncodedDataset, batch_size: int = 256) -> EvalReport:
    """Top-1 exact-match accuracy, partitioned by question type."""
    z = batch_logits(model, ds, batch_size)
    pred = predict_from_logits(z, ds.closed)
    return report_from_predictions(pred, ds.answers, ds.closed, model.cfg.num_answer_classes)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    val: EvalReport | None
    seconds: float

    HEADER = ("epoch", "mean_loss", "val_open_acc", "val_closed_acc", "val_overall_acc", "val_n_open", "val_n_closed")

    def row(self) -> list:
        vals = self.val.row() if self.val is not None else {}
        return [self.epoch, repr(self.mean_loss), vals.get("open_acc", ""), vals.get("closed_acc", ""),
                vals.get("overall_acc", ""), vals.get("n_open", ""), vals.get("n_closed", "")]


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_params: dict[str, np.ndarray] | None


def train(model: VqaModel, train_set: EncodedDataset, val_set: EncodedDataset | None, epochs: int,
          batch_size: int, state: TrainState, warmup_steps: int = 0,
          progress=None) -> TrainResult:
    """Minibatch Adam on the asymmetric loss.

    Minibatch order comes from a generator seeded by ``state.seed`` plus the
    epoch index, independent of parameter initialisation.  The best parameters
    by validation overall accuracy (earliest epoch on ties) are kept.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    params = model.parameters()
    history: list[EpochRecord] = []
    best = None
    for _ in range(epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([state.seed, state.epoch])
        order = rng.permutation(len(train_set))
        total = 0.0
        n_batches = math.ceil(len(train_set) / batch_size)
        for b in range(n_batches):
            idx = order[b * batch_size:(b + 1) * batch_size]
            batch = train_set.subset(idx)
            model.zero_grads()
            loss = model.loss(model.logits(batch.images, batch.questions), batch.answers)
            loss.backward()
            lr = state.lr
            if warmup_steps > 0 and state.step < warmup_steps:
                lr = state.lr * (state.step + 1) / warmup_steps
            adam_step(params, state, lr)
            total += loss.item() * len(idx)
        state.epoch += 1
        report = evaluate(model, val_set) if val_set is not None and len(val_set) else None
        rec = EpochRecord(state.epoch, total / len(train_set), report, time.perf_counter() - t0)
        history.append(rec)
        if report is not None and report.overall_acc > state.best_val_acc:
            state.best_val_acc = report.overall_acc
            state.best_epoch = state.epoch
            best = {k: v.copy() for k, v in model.state_dict().items()}
        log.info("epoch %d loss %.5f val %s (%.1fs)", rec.epoch, rec.mean_loss,
                 f"{report.overall_acc:.4f}" if report else "-", rec.seconds)
        if progress is not None:
            progress(rec)
    return TrainResult(history, best)
