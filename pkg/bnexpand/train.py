"""
    bnexpand.train
    ~~~~~~~~~~~~~~

    Training: forward passes that remember what backward needs, the
    hand-written backward pass, Nesterov SGD and the plateau schedule.

    Weight gradients reach the latent full-precision weights through the
    binary weights unchanged; activation gradients are masked to the
    quantizer's clip range. A group's ``theta`` gradient is the inner
    product of each base's output with the gradient of the quantized group
    output.

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""
from __future__ import annotations

import logging
import os
import time
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, NamedTuple

import numpy as np

from . import checkpoint as ckpt
from .data import augment
from .errors import ContractViolation, DimensionError, NonFiniteError, PretrainRequired
from .tensor import softmax_cross_entropy

if TYPE_CHECKING:
    from collections.abc import Mapping

    from .arch import Model
    from .data import Dataset
    from .quant import QuantSpec
    from .tensor import Tensor

logger = logging.getLogger(__name__)

#: Learning rates of the two activation regimes.
LR_MULTIBIT = 0.05
LR_BINARY = 0.001


def default_lr(quant: QuantSpec) -> float:
    return LR_BINARY if quant.k == 1 else LR_MULTIBIT


class OptimState:
    """Nesterov SGD hyperparameters and per-parameter velocities.

    :param float lr: current learning rate.
    :param float decay: factor applied to ``lr`` on a plateau.
    :param int patience: epochs without improvement before decaying.
    :param float threshold: accuracy gain that counts as improvement.
    """

    def __init__(self, lr: float, decay: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 1e-4, patience: int = 3,
                 threshold: float = 1e-3) -> None:
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.decay = decay
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.patience = patience
        self.threshold = threshold
        self.velocity: dict[str, Tensor] = {}


class TrainState:
    """Append-only history of a run."""

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self.epoch = 0
        self.losses: list[float] = []
        self.accuracies: list[float] = []
        self.best = -np.inf
        self.plateau = 0

    def record(self, loss: float, accuracy: float) -> None:
        self.losses.append(loss)
        self.accuracies.append(accuracy)


class EpochRecord(NamedTuple):
    """One row of the metrics log."""
    epoch: int
    lr: float
    train_loss: float
    test_top1: float
    seconds: float


class Metrics(NamedTuple):
    loss: float
    top1: float
    top5: float


class FitConfig(NamedTuple):
    """Training hyperparameters.

    :param lr: initial learning rate, ``None`` for the regime default.
    :param pretrained: checkpoint of a higher-precision run, required
                       when activations are binary.
    :param checkpoint_dir: where ``last.ckpt`` and ``best.ckpt`` go.
    :param clock: source of the ``seconds`` column.
    """
    epochs: int = 30
    batch_size: int = 128
    lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay: float = 0.1
    patience: int = 3
    threshold: float = 1e-3
    seed: int = 0
    eval_batch_size: int = 500
    pretrained: ckpt.Checkpoint | None = None
    checkpoint_dir: str | os.PathLike[str] | None = None
    clock: Callable[[], float] = time.perf_counter


class FitResult(NamedTuple):
    state: TrainState
    records: list[EpochRecord]
    best: ckpt.Checkpoint


class Saved(NamedTuple):
    """Handle on the caches of a training forward pass."""
    token: int
    model: int


def forward_pass(model: Model, batch: Tensor, mode: str = "train"
                 ) -> tuple[Tensor, Saved | None]:
    """Run ``model`` on ``batch``.

    In ``"train"`` mode batch statistics are used and every unit keeps
    what its backward needs; the returned handle pairs the pass with
    :func:`backward_pass`. ``"eval"`` mode uses running statistics and
    saves nothing.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    expected = model.spec.input_shape
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise DimensionError("sample", expected, batch.shape[1:], "stem input")
    train = mode == "train"
    logits = model.forward(batch, train)
    return logits, Saved(model.token, id(model)) if train else None


def backward_pass(model: Model, saved: Saved | None,
                  grad_logits: Tensor) -> dict[str, Tensor]:
    """Gradients of every parameter given the loss gradient w.r.t. the
    logits of the forward pass ``saved`` came from.

    :raises bnexpand.errors.ContractViolation: if ``saved`` is missing,
                                               belongs to another model or
                                               a later forward has run.
    """
    if saved is None or saved.model != id(model):
        raise ContractViolation("backward needs the handle of a training forward")
    model.backward(grad_logits, saved.token)
    return {p.name: p.grad for p in model.parameters()}


def sgd_step(model: Model, grads: Mapping[str, Tensor], opt: OptimState) -> None:
    """Nesterov momentum update of every parameter, in place.

    Weight decay applies to convolution and classifier weights only.

    :raises bnexpand.errors.NonFiniteError: before anything is updated, if
                                            a gradient holds NaN or Inf.
    """
    params = model.parameters()
    for p in params:
        if not np.isfinite(grads[p.name]).all():
            raise NonFiniteError(p.name)
    for p in params:
        g = grads[p.name]
        if p.decay and opt.weight_decay:
            g = g + opt.weight_decay * p.value
        v = opt.velocity.get(p.name)
        v = g.copy() if v is None else opt.momentum * v + g
        opt.velocity[p.name] = v
        p.value -= (opt.lr * (g + opt.momentum * v)).astype(p.value.dtype)


def lr_schedule_step(state: TrainState, opt: OptimState) -> bool:
    """Divide the learning rate when the latest accuracy ends a plateau
    of ``opt.patience`` epochs; return whether it did.

    >>> state, opt = TrainState(), OptimState(lr=0.05)
    >>> for accuracy in [0.5, 0.5, 0.5, 0.5]:
    ...     state.record(1.0, accuracy)
    ...     decayed = lr_schedule_step(state, opt)
    >>> decayed, round(opt.lr, 6)
    (True, 0.005)
    """
    accuracy = state.accuracies[-1]
    if accuracy > state.best + opt.threshold:
        state.best = accuracy
        state.plateau = 0
        return False
    state.plateau += 1
    if state.plateau < opt.patience:
        return False
    state.plateau = 0
    opt.lr *= opt.decay
    logger.warning("validation accuracy plateaued at %.4f, learning rate "
                   "now %g", state.best, opt.lr)
    return True


def evaluate(model: Model, dataset: Dataset, batch_size: int = 500) -> Metrics:
    """Single-crop loss, top-1 and top-5 accuracy on ``dataset``."""
    loss = top1 = top5 = 0.0
    for images, labels in dataset.batches(batch_size):
        logits, _ = forward_pass(model, images.astype(model.dtype, copy=False),
                                 "eval")
        batch_loss, _ = softmax_cross_entropy(logits, labels)
        loss += batch_loss * len(labels)
        ranked = np.argsort(-logits, axis=1, kind="stable")
        top1 += float((ranked[:, 0] == labels).sum())
        top5 += float((ranked[:, :5] == labels[:, None]).any(axis=1).sum())
    n = max(dataset.size, 1)
    return Metrics(loss / n, top1 / n, top5 / n)


def train_epoch(model: Model, dataset: Dataset, opt: OptimState,
                batch_size: int, seed: int, epoch: int) -> float:
    """One pass over ``dataset`` in an order drawn from ``(seed, epoch)``;
    returns the mean training loss."""
    order = np.random.default_rng([seed, epoch]).permutation(dataset.size)
    augment_rng = np.random.default_rng([seed, epoch, 1])
    total = 0.0
    for images, labels in dataset.batches(batch_size, order):
        images = augment(images, dataset.policy, augment_rng)
        logits, saved = forward_pass(model, images.astype(model.dtype, copy=False))
        loss, grad = softmax_cross_entropy(logits, labels)
        sgd_step(model, backward_pass(model, saved, grad), opt)
        total += loss * len(labels)
    return total / max(dataset.size, 1)


def state_tensors(state: TrainState, opt: OptimState) -> dict[str, Any]:
    """Training state as checkpoint tensors."""
    tensors: dict[str, Any] = {
        "train.seed": np.array([state.seed], dtype=np.int64),
        "train.plateau": np.array([state.plateau], dtype=np.int64),
        "train.best": np.array([state.best], dtype=np.float64),
        "train.lr": np.array([opt.lr], dtype=np.float64),
        "train.losses": np.array(state.losses, dtype=np.float64),
        "train.accuracies": np.array(state.accuracies, dtype=np.float64),
    }
    for name, velocity in opt.velocity.items():
        tensors[f"optim.{name}"] = velocity
    return tensors


def restore_state(checkpoint: ckpt.Checkpoint, state: TrainState,
                  opt: OptimState, model: Model) -> None:
    """Load the training state of ``checkpoint`` into ``state``, ``opt``
    and ``model``."""
    tensors = checkpoint.tensors
    ckpt.restore(model, checkpoint)
    state.epoch = checkpoint.epoch
    state.seed = int(tensors["train.seed"][0])
    state.plateau = int(tensors["train.plateau"][0])
    state.best = float(tensors["train.best"][0])
    state.losses = [float(v) for v in tensors["train.losses"]]
    state.accuracies = [float(v) for v in tensors["train.accuracies"]]
    opt.lr = float(tensors["train.lr"][0])
    params = {p.name: p.value for p in model.parameters()}
    opt.velocity = {
        name[len("optim."):]: value.astype(params[name[len("optim."):]].dtype)
        for name, value in tensors.items()
        if name.startswith("optim.") and name[len("optim."):] in params}


def fit(model: Model, train: Dataset, test: Dataset, config: FitConfig,
        resume: ckpt.Checkpoint | None = None) -> FitResult:
    """Train ``model``, evaluating on ``test`` after every epoch.

    Every epoch is a deterministic function of the model, the optimizer
    state, ``config.seed`` and the epoch number, so resuming from a
    checkpoint replays the remaining epochs bit for bit. A resumed run
    starts from the ``best.ckpt`` already in ``config.checkpoint_dir``;
    without one, ``FitResult.best`` falls back to the model at the resume
    point unless a later epoch beats the recorded accuracies.

    :raises bnexpand.errors.PretrainRequired: for binary activations
                                              without ``config.pretrained``.
    """
    spec = model.spec
    if train.sample_shape != spec.input_shape:
        raise DimensionError("sample", spec.input_shape, train.sample_shape,
                             "dataset")
    if train.num_classes != spec.num_classes:
        raise DimensionError("class", spec.num_classes, train.num_classes,
                             "dataset")

    state = TrainState(config.seed)
    opt = OptimState(config.lr or default_lr(spec.quant), config.decay,
                     config.momentum, config.weight_decay, config.patience,
                     config.threshold)
    if resume is not None:
        restore_state(resume, state, opt, model)
        logger.info("resuming at epoch %d", state.epoch)
    elif spec.quant.k == 1:
        if config.pretrained is None:
            raise PretrainRequired(
                "binary activations need a full-precision checkpoint "
                "to start from")
        ckpt.restore(model, config.pretrained, strict=False, check_spec=False)

    out = None if config.checkpoint_dir is None else Path(config.checkpoint_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    best = ckpt.snapshot(model, state.epoch, state_tensors(state, opt))
    if resume is not None and out is not None and (out / "best.ckpt").exists():
        best = ckpt.load_checkpoint(out / "best.ckpt", spec)
    best_accuracy = max(state.accuracies, default=-np.inf)
    records = []
    for epoch in range(state.epoch, config.epochs):
        start = config.clock()
        lr = opt.lr
        loss = train_epoch(model, train, opt, config.batch_size, state.seed,
                           epoch)
        accuracy = evaluate(model, test, config.eval_batch_size).top1
        improved = accuracy > best_accuracy
        best_accuracy = max(best_accuracy, accuracy)
        state.record(loss, accuracy)
        lr_schedule_step(state, opt)
        state.epoch = epoch + 1

        record = EpochRecord(epoch + 1, lr, loss, accuracy,
                             config.clock() - start)
        records.append(record)
        logger.info("epoch %d: lr %g, train loss %.4f, test top-1 %.4f (%.1fs)",
                    *record)

        last = ckpt.snapshot(model, state.epoch, state_tensors(state, opt))
        if improved:
            best = last
        if out is not None:
            ckpt.save_checkpoint(last, out / "last.ckpt")
            if best is last:
                ckpt.save_checkpoint(best, out / "best.ckpt")
    return FitResult(state, records, best)
