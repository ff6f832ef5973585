"""Supervised training protocol, cross-validation splits and evaluation metrics."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .model import VisionHgNN, rank_classes, softmax_probs

logger = logging.getLogger(__name__)

TOP_N = (1, 2, 3, 5)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 48
    lr: float = 1e-3
    scheduler_patience: int = 10
    scheduler_factor: float = 0.5
    early_stop_patience: int = 20
    folds: int = 10
    fold: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ConfigError(f"scheduler_factor must lie in (0, 1), got {self.scheduler_factor}")
        if self.folds < 3:
            raise ConfigError(f"need at least 3 folds for train/val/test, got {self.folds}")
        if not 0 <= self.fold < self.folds:
            raise ConfigError(f"fold {self.fold} out of range for {self.folds} folds")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        return self

    @classmethod
    def from_dict(cls, values: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**values)


# ---------------------------------------------------------------------------
# Loss and optimizer
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits), B x C."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ConfigError(f"logits {logits.shape} and labels {labels.shape} disagree")
    C = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ConfigError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.size), labels] = 1
    picked = ad.sum_reduce(ad.mul(ad.log_softmax_over(logits, axis=1), Tensor(onehot)))
    return ad.scale(picked, -1.0 / labels.size)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update. Parameter arrays are replaced, not mutated."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state


class PlateauScheduler:
    """Halve the learning rate when validation top-1 stalls for ``patience`` epochs."""

    def __init__(self, lr: float, patience: int = 10, factor: float = 0.5):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = -np.inf
        self.bad_epochs = 0
        self.halvings: list[int] = []
        self.epoch = 0

    def step(self, val_top1: float) -> float:
        self.epoch += 1
        if val_top1 > self.best:
            self.best = val_top1
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
                self.halvings.append(self.epoch)
        return self.lr


def plateau_schedule(history: Sequence[float], lr: float, patience: int = 10, factor: float = 0.5) -> list[float]:
    """Learning rate in force after each epoch of ``history``."""
    sched = PlateauScheduler(lr, patience, factor)
    return [sched.step(v) for v in history]


# ---------------------------------------------------------------------------
# Cross-validation splits
# ---------------------------------------------------------------------------


def kfold_split(dataset_size: int, k: int, seed: int = 0) -> list[np.ndarray]:
    """Seeded shuffle cut into k contiguous folds whose sizes differ by at most one."""
    if k < 1 or dataset_size < k:
        raise DataError(f"cannot split {dataset_size} items into {k} folds")
    order = np.random.default_rng(seed).permutation(dataset_size)
    return [np.sort(f) for f in np.array_split(order, k)]


def assemble_split(folds: Sequence[np.ndarray], test_fold: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(train, val, test) with val = fold test+1 (mod k) and train = the other k-2."""
    k = len(folds)
    if k < 3:
        raise ConfigError("need at least 3 folds")
    if not 0 <= test_fold < k:
        raise ConfigError(f"test fold {test_fold} out of range for {k} folds")
    val_fold = (test_fold + 1) % k
    train = np.sort(np.concatenate([f for i, f in enumerate(folds) if i not in (test_fold, val_fold)]))
    return train, np.asarray(folds[val_fold]), np.asarray(folds[test_fold])


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    top_n: dict[int, float]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    confusion: list[list[int]]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    undefined_precision: list[int] = field(default_factory=list)
    undefined_recall: list[int] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    @property
    def top1(self) -> float:
        return self.top_n[1]

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["top_n"] = {str(k): v for k, v in self.top_n.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        names = self.class_names or [str(i) for i in range(len(self.precision))]
        width = max(8, *(len(n) for n in names))
        lines = ["  ".join(f"top-{n}={self.top_n[n]:.4f}" for n in sorted(self.top_n))]
        lines.append(f"{'class':<{width}}  {'prec':>7}  {'recall':>7}  {'f1':>7}  {'support':>7}")
        for i, name in enumerate(names):
            flag = "*" if i in self.undefined_precision else " "
            lines.append(
                f"{name:<{width}}  {self.precision[i]:>7.4f}{flag} {self.recall[i]:>7.4f}  "
                f"{self.f1[i]:>7.4f}  {self.support[i]:>7d}"
            )
        lines.append(
            f"{'macro':<{width}}  {self.macro_precision:>7.4f}   {self.macro_recall:>7.4f}  {self.macro_f1:>7.4f}"
        )
        if self.undefined_precision:
            lines.append("* precision undefined (no predictions); reported as 0")
        return "\n".join(lines)


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
    return cm


def _exact_mean(num: np.ndarray, den: np.ndarray) -> float:
    # counts are integers, so average the exact ratios and round once
    ratios = [Fraction(int(a), int(b)) if b else Fraction(0) for a, b in zip(num, den)]
    return float(sum(ratios) / len(ratios))


def report_from_confusion(cm: np.ndarray, top_n: dict[int, float] | None = None, class_names=None) -> EvalReport:
    """Per-class and macro precision/recall/F1 from a confusion matrix (rows = truth)."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    # 2TP / (2TP + FP + FN) equals the harmonic mean but rounds only once
    denom = predicted + support
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    if top_n is None:
        total = cm.sum()
        top_n = {1: float(tp.sum() / total) if total else 0.0}
    return EvalReport(
        top_n=top_n,
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=support.tolist(),
        confusion=cm.tolist(),
        macro_precision=_exact_mean(tp, predicted),
        macro_recall=_exact_mean(tp, support),
        macro_f1=_exact_mean(2 * tp, denom),
        undefined_precision=np.flatnonzero(predicted == 0).tolist(),
        undefined_recall=np.flatnonzero(support == 0).tolist(),
        class_names=list(class_names or []),
    )


def top_n_accuracy(probs: np.ndarray, labels: Sequence[int], n: int) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("top-N accuracy of an empty set")
    ranked = rank_classes(probs)[:, : min(n, probs.shape[1])]
    return float(np.mean(np.any(ranked == labels[:, None], axis=1)))


def compute_report(probs: np.ndarray, labels: Sequence[int], class_names=None) -> EvalReport:
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    top_n = {n: top_n_accuracy(probs, labels, n) for n in TOP_N}
    cm = confusion_matrix(labels, rank_classes(probs)[:, 0], probs.shape[1])
    return report_from_confusion(cm, top_n, class_names)


def evaluate(model: VisionHgNN, patches: np.ndarray, labels: Sequence[int]) -> EvalReport:
    if len(labels) == 0:
        raise DataError("cannot evaluate on an empty split")
    return compute_report(model.predict_proba(patches), labels, model.class_names)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_top1: float
    lr: float


@dataclass
class TrainResult:
    model: VisionHgNN  # parameters of the best validation epoch
    history: list[EpochRecord]
    best_epoch: int
    test_report: EvalReport | None = None

    def history_csv(self) -> str:
        rows = ["epoch,train_loss,val_top1,lr"]
        rows += [f"{r.epoch},{r.train_loss:.6f},{r.val_top1:.6f},{r.lr:.8g}" for r in self.history]
        return "\n".join(rows) + "\n"

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_top1", "lr"])
            for r in self.history:
                writer.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_top1:.6f}", f"{r.lr:.8g}"])


def train_epoch(
    model: VisionHgNN,
    patches: np.ndarray,
    labels: np.ndarray,
    order: np.ndarray,
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
    epoch: int,
) -> float:
    """One pass over ``order`` in minibatches (last partial batch kept). Returns the mean loss."""
    params = model.params
    total, count = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start : start + cfg.batch_size]
        rows = [
            ad.reshape(model.logits(patches[i], training=True, key=(cfg.seed, epoch, int(i))), (1, -1))
            for i in batch
        ]
        loss = cross_entropy(ad.concat(rows, axis=0), labels[batch])
        params.zero_grad()
        ad.backward(loss)
        grads = {name: t.grad for name, t in params.tensors.items()}
        adam_step(params.tensors, grads, state, lr, (cfg.beta1, cfg.beta2), cfg.eps)
        total += float(loss.data) * len(batch)
        count += len(batch)
    params.zero_grad()
    return total / count


def train(
    model: VisionHgNN,
    patches: np.ndarray,
    labels: Sequence[int],
    split: tuple[np.ndarray, np.ndarray, np.ndarray | None],
    cfg: TrainConfig,
    progress=None,
) -> TrainResult:
    """Adam + plateau halving + early stopping on validation top-1.

    ``split`` is (train, val, test) index arrays into ``patches``; ``test`` may
    be None. The returned model holds the best-validation parameters and the
    test report is computed with them.
    """
    cfg.validate()
    labels = np.asarray(labels, dtype=np.intp)
    train_idx, val_idx, test_idx = split
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise DataError("training and validation splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    sched = PlateauScheduler(cfg.lr, cfg.scheduler_patience, cfg.scheduler_factor)
    lr = cfg.lr
    best_top1, best_epoch, best_params, stale = -1.0, 0, model.params.copy(), 0
    history: list[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(np.asarray(train_idx))
        loss = train_epoch(model, patches, labels, order, state, lr, cfg, epoch)
        val_top1 = top_n_accuracy(model.predict_proba(patches[val_idx]), labels[val_idx], 1)
        history.append(EpochRecord(epoch, loss, val_top1, lr))
        if progress is not None:
            progress(history[-1])
        logger.info("epoch %d loss %.4f val_top1 %.4f lr %.3g", epoch, loss, val_top1, lr)
        if val_top1 > best_top1:
            best_top1, best_epoch, best_params, stale = val_top1, epoch, model.params.copy(), 0
        else:
            stale += 1
        lr = sched.step(val_top1)
        if stale >= cfg.early_stop_patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    best = VisionHgNN(model.config, best_params, model.class_names)
    report = None
    if test_idx is not None and len(test_idx):
        report = evaluate(best, patches[test_idx], labels[test_idx])
    return TrainResult(best, history, best_epoch, report)
