"""Adam, categorical cross-entropy, the epoch loop, and batch/epoch sweeps."""
from __future__ import annotations

import contextlib
import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .net import Network
from .tensor import NumericError, Rng, ShapeError

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle_each_epoch: bool = True
    # stop once validation accuracy has not improved for this many epochs; 0 disables
    plateau_patience: int = 0
    eval_batch_size: int = 64
    strict_deterministic: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch_size, epochs and eval_batch_size must be >= 1")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.plateau_patience < 0:
            raise ConfigError("plateau_patience must be >= 0")


# --------------------------------------------------------------------------- #
# Loss
# --------------------------------------------------------------------------- #
def cross_entropy(probs: np.ndarray, targets) -> float:
    """Mean of -log p[true class], with p clamped to 1e-12 before the log."""
    p = np.asarray(probs).reshape(len(probs), -1)
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.shape[0] != p.shape[0]:
            raise ShapeError(f"{t.shape[0]} labels for {p.shape[0]} rows")
        picked = p[np.arange(p.shape[0]), t.astype(np.int64)]
    else:
        t = t.reshape(p.shape[0], -1)
        if t.shape != p.shape:
            raise ShapeError(f"targets {t.shape} vs probabilities {p.shape}")
        picked = np.sum(p * t, axis=1)
    losses = -np.log(np.maximum(picked.astype(np.float64), 1e-12))
    return float(np.mean(losses))


# --------------------------------------------------------------------------- #
# Adam
# --------------------------------------------------------------------------- #
@dataclass
class AdamState:
    m: list[dict[str, np.ndarray]]
    v: list[dict[str, np.ndarray]]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(
            m=[{k: np.zeros_like(a) for k, a in g.items()} for g in params],
            v=[{k: np.zeros_like(a) for k, a in g.items()} for g in params],
        )


def adam_step(params, grads, state: AdamState, cfg: TrainConfig, lr: float | None = None) -> None:
    """One Adam update, in place on ``params`` and ``state``.

    ``lr`` overrides ``cfg.learning_rate``; zero advances the moments only.
    """
    lr = cfg.learning_rate if lr is None else lr
    for idx, (group, ggroup) in enumerate(zip(params, grads)):
        for key, g in ggroup.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for layer {idx + 1} {key}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for group, ggroup, m, v in zip(params, grads, state.m, state.v):
        for key, g in ggroup.items():
            mk, vk = m[key], v[key]
            mk *= b1
            mk += (1.0 - b1) * g
            vk *= b2
            vk += (1.0 - b2) * (g * g)
            if lr == 0:
                continue
            step = (mk / bc1) / (np.sqrt(vk / bc2) + cfg.adam_eps)
            group[key] -= (lr * step).astype(group[key].dtype, copy=False)


# --------------------------------------------------------------------------- #
# Training loop
# --------------------------------------------------------------------------- #
@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float


LOG_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds")


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, include_time: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for r in self.records:
            writer.writerow(record_row(r, include_time))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        out = cls()
        for row in csv.DictReader(io.StringIO(text)):
            out.records.append(
                EpochRecord(int(row["epoch"]), *(float(row[k]) if row[k] else float("nan") for k in LOG_FIELDS[1:]))
            )
        return out


def record_row(r: EpochRecord, include_time: bool = True) -> list[str]:
    # wall time is the one non-reproducible column; strict runs leave it blank
    seconds = f"{r.seconds:.3f}" if include_time else ""
    return [str(r.epoch), repr(r.train_loss), repr(r.train_acc), repr(r.val_loss), repr(r.val_acc), seconds]


class TrainingDiverged(NumericError):
    def __init__(self, msg: str, log: TrainLog):
        super().__init__(msg)
        self.log = log


@contextlib.contextmanager
def deterministic_threads(strict: bool):
    """Pin BLAS to one thread so reductions inside matmuls keep a fixed order."""
    if not strict:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> tuple[float, float, np.ndarray]:
    """Eval-mode mean loss, accuracy and probabilities over a whole split."""
    net.eval()
    probs = [net.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    p = np.concatenate(probs, axis=0)
    return cross_entropy(p, y), float(np.mean(np.argmax(p, axis=1) == y)), p


def batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(net: Network, train_data, val_data, cfg: TrainConfig,
          on_epoch: Callable[[EpochRecord, Network], None] | None = None) -> tuple[TrainLog, Network]:
    """Minibatch Adam over ``train_data``; evaluates ``val_data`` after every epoch.

    ``train_data`` and ``val_data`` are ``(images, labels)`` pairs.  The final
    short batch is kept.  ``on_epoch`` sees every record as it is produced.
    """
    x_tr, y_tr = train_data
    x_va, y_va = val_data
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    y_tr = np.asarray(y_tr, dtype=np.int64)
    y_va = np.asarray(y_va, dtype=np.int64)
    rng = Rng(cfg.seed)
    shuffle_rng, dropout_rng = rng.spawn(), rng.spawn()
    state = AdamState.zeros_like(net.params)
    history = TrainLog()
    best_acc, stale = -1.0, 0
    n = len(x_tr)
    order = np.arange(n)
    with deterministic_threads(cfg.strict_deterministic):
        for epoch in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            if cfg.shuffle_each_epoch:
                order = shuffle_rng.permutation(n)
            net.train()
            loss_sum, correct = 0.0, 0
            for b, idx in enumerate(batches(n, cfg.batch_size, order)):
                xb, yb = x_tr[idx], y_tr[idx]
                try:
                    probs = net.forward(xb, dropout_rng)
                    loss = cross_entropy(probs, yb)
                    if not np.isfinite(loss):
                        raise NumericError("non-finite loss")
                    adam_step(net.params, net.backward(yb), state, cfg)
                except NumericError as exc:
                    raise TrainingDiverged(f"epoch {epoch}, batch {b}: {exc}", history) from None
                loss_sum += loss * len(idx)
                correct += int(np.sum(np.argmax(probs, axis=1) == yb))
            try:
                val_loss, val_acc, _ = evaluate(net, x_va, y_va, cfg.eval_batch_size)
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch} validation: {exc}", history) from None
            if not np.isfinite(val_loss):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", history)
            rec = EpochRecord(epoch, loss_sum / n, correct / n, val_loss, val_acc, time.perf_counter() - start)
            history.records.append(rec)
            log.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f (%.1fs)",
                     epoch, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc, rec.seconds)
            if on_epoch is not None:
                on_epoch(rec, net)
            if cfg.plateau_patience:
                if val_acc > best_acc:
                    best_acc, stale = val_acc, 0
                else:
                    stale += 1
                    if stale >= cfg.plateau_patience:
                        break
    net.eval()
    return history, net


# --------------------------------------------------------------------------- #
# Sweeps
# --------------------------------------------------------------------------- #
@dataclass
class SweepRow:
    setting: str
    seconds_per_epoch: float
    test_accuracy: float


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["setting", "seconds_per_epoch", "test_accuracy"])
        for r in self.rows:
            writer.writerow([r.setting, f"{r.seconds_per_epoch:.6f}", repr(r.test_accuracy)])
        return buf.getvalue()


def sweep(make_net: Callable[[], Network], train_data, val_data, test_data, cfg: TrainConfig,
          batch_sizes=(), epoch_budgets=()) -> SweepResult:
    """One training run per batch size (at ``cfg.epochs``) and per epoch budget (at ``cfg.batch_size``).

    Seconds per epoch is the fastest epoch of a run.  Interference from the
    rest of the machine only ever adds time, so the minimum is the least noisy
    estimate of the cost itself.
    """
    batch_sizes, epoch_budgets = list(batch_sizes), list(epoch_budgets)
    if not batch_sizes and not epoch_budgets:
        raise ConfigError("sweep needs at least one batch size or epoch budget")
    settings = [(f"batch_size={b}", {"batch_size": int(b)}) for b in batch_sizes]
    settings += [(f"epochs={e}", {"epochs": int(e)}) for e in epoch_budgets]
    result = SweepResult()
    x_te, y_te = test_data
    for label, override in settings:
        run_cfg = TrainConfig(**{**cfg.__dict__, **override})
        history, net = train(make_net(), train_data, val_data, run_cfg)
        seconds = min(r.seconds for r in history.records)
        _, acc, _ = evaluate(net, x_te, np.asarray(y_te), cfg.eval_batch_size)
        result.rows.append(SweepRow(label, seconds, acc))
        log.info("sweep %s: %.3f s/epoch, test accuracy %.4f", label, seconds, acc)
    return result
