"""
Training loops: SGD with momentum, step learning-rate decay, cross-entropy
epochs with per-epoch cell-state resets, and feature distillation from a frozen
PTL teacher into a backbone-only student.
"""

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .data import BatchPlan, DataError, Dataset, batches, prefetch
from .network import BackboneNetwork, Network, PTLNetwork
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    backward,
    l1_loss,
    no_grad,
    scale,
    softmax_cross_entropy,
)

COLUMNS = ("epoch", "loss", "train_acc", "eval_acc", "lr", "seconds")

EpochHook = Callable[[Network, int], None]
BatchHook = Callable[[Network, int, int, float], None]


@dataclass
class OptimizerState:
    """SGD-M hyper-parameters, step decay schedule and one velocity per parameter."""

    lr0: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_every: int = 10
    velocity: List[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be >= 0, got {self.lr0}")


def lr_schedule(epoch: int, opt: OptimizerState) -> float:
    """``lr0 * decay_factor ** floor(epoch / decay_every)``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return opt.lr0 * opt.decay_factor ** (epoch // opt.decay_every)


def sgd_momentum_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    opt: OptimizerState,
    epoch: int,
) -> Sequence[Tensor]:
    """``v <- momentum * v + g``; ``p <- p - lr(epoch) * v``.

    Parameter arrays are replaced, never written in place, so contexts saved by
    an earlier forward pass keep the values they were computed with.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not opt.velocity:
        opt.velocity = [np.zeros_like(p.data) for p in params]
    if len(opt.velocity) != len(params):
        raise ShapeError(
            f"optimizer tracks {len(opt.velocity)} parameters, got {len(params)}"
        )

    lr = lr_schedule(epoch, opt)
    for index, (param, grad) in enumerate(zip(params, grads)):
        if grad.shape != param.shape or opt.velocity[index].shape != param.shape:
            raise ShapeError(
                f"parameter {param.name or index}: shape {param.shape}, "
                f"gradient {grad.shape}"
            )
        velocity = opt.momentum * opt.velocity[index] + grad
        opt.velocity[index] = velocity
        param.data = param.data - lr * velocity
    return params


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainRow:
    epoch: int
    loss: float
    train_acc: float
    eval_acc: Optional[float]
    lr: float
    seconds: float

    def to_csv(self) -> List[str]:
        return [
            str(self.epoch),
            f"{self.loss:.6f}",
            f"{self.train_acc:.6f}",
            "" if self.eval_acc is None else f"{self.eval_acc:.6f}",
            f"{self.lr:.6g}",
            f"{self.seconds:.6f}",
        ]


@dataclass
class TrainReport:
    rows: List[TrainRow] = field(default_factory=list)

    def append(self, row: TrainRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            previous = self.rows[-1].epoch
            raise ValueError(f"epoch {row.epoch} does not follow epoch {previous}")
        self.rows.append(row)

    def to_rows(self) -> List[List[str]]:
        return [row.to_csv() for row in self.rows]

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[TrainRow]:
        return iter(self.rows)


@dataclass
class EvalResult:
    """Eval-mode predictions over a whole dataset, in dataset order."""

    logits: np.ndarray
    labels: np.ndarray
    class_count: int

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=1)

    @property
    def correct(self) -> int:
        return int((self.predictions == self.labels).sum())

    @property
    def total(self) -> int:
        return int(self.labels.shape[0])

    @property
    def accuracy(self) -> float:
        return self.correct / self.total

    def per_class(self) -> List[Tuple[int, int, int]]:
        """``(class, correct, total)`` for every class."""
        hits = self.predictions == self.labels
        totals = np.bincount(self.labels, minlength=self.class_count)
        correct = np.bincount(self.labels[hits], minlength=self.class_count)
        return [(k, int(correct[k]), int(totals[k])) for k in range(self.class_count)]


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------


def _epoch_batches(
    dataset: Dataset, plan: BatchPlan, epoch: int, augment: bool, ahead: bool
) -> Iterator[Tuple[Tensor, np.ndarray]]:
    source = batches(dataset, plan, epoch, augment=augment)
    return prefetch(source) if ahead else source


def _start_epoch(network: Network, epoch: int, hook: Optional[EpochHook]) -> None:
    if network.mode != "train":
        raise ValueError(f"training needs a network in train mode, got {network.mode}")
    network.reset_states()
    if not network.states_are_zero():
        raise RuntimeError(f"cell states not zero at the start of epoch {epoch}")
    if getattr(network, "state_backprop", False):
        warnings.warn(
            "state_backprop keeps one extra batch of graph alive per cell",
            UserWarning,
            stacklevel=3,
        )
    if hook is not None:
        hook(network, epoch)


def _finish_row(
    network: Network,
    epoch: int,
    loss_sum: float,
    correct: int,
    seen: int,
    lr: float,
    started: float,
    eval_dataset: Optional[Dataset],
    batch_size: int,
    record_time: bool,
) -> TrainRow:
    mean_loss = loss_sum / seen
    if not math.isfinite(mean_loss):
        raise NonFiniteError(f"epoch {epoch}: mean loss is {mean_loss}")
    seconds = time.perf_counter() - started if record_time else 0.0
    eval_acc = None
    if eval_dataset is not None:
        eval_acc = evaluate(network, eval_dataset, batch_size).accuracy
    row = TrainRow(epoch, mean_loss, correct / seen, eval_acc, lr, seconds)
    logging.info(
        f"Epoch {epoch}: loss {mean_loss:.4f}, train acc {row.train_acc:.4f}"
        + (f", eval acc {eval_acc:.4f}" if eval_acc is not None else "")
    )
    return row


def train_epoch(
    network: Network,
    dataset: Dataset,
    opt: OptimizerState,
    seed: int,
    epoch: int = 0,
    batch_size: int = 32,
    eval_dataset: Optional[Dataset] = None,
    augment: bool = False,
    prefetch_batches: bool = False,
    record_time: bool = True,
    on_epoch_start: Optional[EpochHook] = None,
    on_batch: Optional[BatchHook] = None,
) -> TrainRow:
    """One cross-entropy epoch.

    Every cell state is zeroed before the first batch. Each batch then runs a
    train-mode forward (advancing the states), the loss, the backward pass and
    one optimizer step.
    """
    if dataset is None or len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    dataset = dataset.astype(network.config.dtype)
    _start_epoch(network, epoch, on_epoch_start)
    params = network.parameters()
    plan = BatchPlan(seed, batch_size)
    started = time.perf_counter()
    loss_sum, correct, seen = 0.0, 0, 0
    for index, (images, labels) in enumerate(
        _epoch_batches(dataset, plan, epoch, augment, prefetch_batches)
    ):
        logits, _ = network.forward(images)
        loss = softmax_cross_entropy(logits, labels)
        grads = backward(loss, params)
        sgd_momentum_step(params, grads, opt, epoch)
        value = loss.item()
        loss_sum += value * len(labels)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
        seen += len(labels)
        logging.debug(f"Epoch {epoch} batch {index}: loss {value:.6f}")
        if on_batch is not None:
            on_batch(network, epoch, index, value)
    return _finish_row(
        network,
        epoch,
        loss_sum,
        correct,
        seen,
        lr_schedule(epoch, opt),
        started,
        eval_dataset,
        batch_size,
        record_time,
    )


def distill_loss(
    student_logits: Tensor,
    labels: Sequence[int],
    student_feat: Tensor,
    teacher_feat: Tensor,
    lam: float,
) -> Tensor:
    """``(1 - lam) * cross_entropy + lam * l1(student_feat, teacher_feat)``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    ce = softmax_cross_entropy(student_logits, labels)
    l1 = l1_loss(student_feat, teacher_feat)
    return add(scale(ce, 1.0 - lam), scale(l1, lam))


@dataclass
class DistillConfig:
    """A frozen eval-mode PTL teacher, a backbone-only student and the loss mix."""

    lam: float
    teacher: PTLNetwork
    student: BackboneNetwork

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.teacher.feature_channels != self.student.feature_channels:
            raise ShapeError(
                f"teacher feature extent {self.teacher.feature_channels} does not "
                f"match student feature extent {self.student.feature_channels}"
            )


def distill_epoch(
    config: DistillConfig,
    dataset: Dataset,
    opt: OptimizerState,
    seed: int,
    epoch: int = 0,
    batch_size: int = 32,
    eval_dataset: Optional[Dataset] = None,
    augment: bool = False,
    prefetch_batches: bool = False,
    record_time: bool = True,
    on_epoch_start: Optional[EpochHook] = None,
    on_batch: Optional[BatchHook] = None,
) -> TrainRow:
    """One distillation epoch; only the student's parameters move."""
    if config.teacher.mode != "eval":
        raise ValueError("the distillation teacher must be in eval mode")
    if dataset is None or len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    student = config.student
    dataset = dataset.astype(student.config.dtype)
    _start_epoch(student, epoch, on_epoch_start)
    params = student.parameters()
    plan = BatchPlan(seed, batch_size)
    started = time.perf_counter()
    loss_sum, correct, seen = 0.0, 0, 0
    for index, (images, labels) in enumerate(
        _epoch_batches(dataset, plan, epoch, augment, prefetch_batches)
    ):
        with no_grad():
            _, teacher_feat = config.teacher.forward(images)
        logits, student_feat = student.forward(images)
        loss = distill_loss(logits, labels, student_feat, teacher_feat, config.lam)
        grads = backward(loss, params)
        sgd_momentum_step(params, grads, opt, epoch)
        value = loss.item()
        loss_sum += value * len(labels)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
        seen += len(labels)
        logging.debug(f"Distill epoch {epoch} batch {index}: loss {value:.6f}")
        if on_batch is not None:
            on_batch(student, epoch, index, value)
    return _finish_row(
        student,
        epoch,
        loss_sum,
        correct,
        seen,
        lr_schedule(epoch, opt),
        started,
        eval_dataset,
        batch_size,
        record_time,
    )


def evaluate(network: Network, dataset: Dataset, batch_size: int = 32) -> EvalResult:
    """Eval-mode logits for every sample; the network's mode is restored afterwards."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    dataset = dataset.astype(network.config.dtype)
    previous = network.mode
    network.set_mode("eval")
    chunks = []
    try:
        for start in range(0, len(dataset), batch_size):
            batch = Tensor(dataset.images[start : start + batch_size])
            with no_grad():
                logits, _ = network.forward(batch)
            if not network.states_are_zero():
                raise RuntimeError("an eval forward wrote to the cell states")
            chunks.append(logits.data)
    finally:
        network.set_mode(previous)
    result = EvalResult(np.concatenate(chunks), dataset.labels, dataset.class_count)
    logging.debug(f"Evaluated {dataset.name}: accuracy {result.accuracy:.4f}")
    return result


def fit(
    network: Network,
    dataset: Dataset,
    opt: OptimizerState,
    epochs: int,
    seed: int,
    batch_size: int = 32,
    eval_dataset: Optional[Dataset] = None,
    distill: Optional[DistillConfig] = None,
    **kwargs: Any,
) -> TrainReport:
    """Run ``epochs`` train (or distill, when ``distill`` is given) epochs.

    Extra keyword arguments go to every :func:`train_epoch` or
    :func:`distill_epoch` call.
    """
    report = TrainReport()
    shared = dict(batch_size=batch_size, eval_dataset=eval_dataset, **kwargs)
    for epoch in range(epochs):
        if distill is not None:
            row = distill_epoch(distill, dataset, opt, seed, epoch=epoch, **shared)
        else:
            row = train_epoch(network, dataset, opt, seed, epoch=epoch, **shared)
        report.append(row)
    return report
