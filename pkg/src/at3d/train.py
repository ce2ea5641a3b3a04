"""Momentum SGD with a step schedule, early stopping, and three-clip evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import __version__, rng
from .container import atomic_write
from .data import PipelineConfig, RawVideo, eval_clips, train_sample
from .errors import ConfigError, DataError, LabelError, NumericError
from .nn import functional as F
from .nn.layers import Dropout
from .nn.module import Module
from .tensor import Tape, Tensor, backward, no_grad, softmax, stack

Sample = tuple[RawVideo, int]


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    step_size: int = 15
    gamma: float = 0.1
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 5
    min_delta: float = 0.0

    def __post_init__(self):
        if self.lr0 <= 0 or self.gamma <= 0 or self.step_size < 1:
            raise ConfigError("lr0, gamma and step_size must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.min_delta < 0:
            raise ConfigError("momentum, weight_decay and min_delta must be non-negative")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("patience, batch_size and max_epochs must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """``lr0 * gamma ** floor((epoch - 1) / step_size)`` for 1-based epochs,
    evaluated in decimal so printed rates stay clean (0.0001, not
    0.00010000000000000002)."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    k = (epoch - 1) // cfg.step_size
    return float(Decimal(repr(cfg.lr0)) * Decimal(repr(cfg.gamma)) ** k)


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    velocity: dict[str, np.ndarray],
    cfg: TrainConfig,
    epoch: int,
) -> None:
    """In-place momentum update with coupled weight decay on every parameter:
    ``g' = g + wd*p;  v = m*v + g';  p -= lr*v``.  Missing gradients count
    as zero."""
    lr = lr_at(epoch, cfg)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}", stage=name)
        g = g + cfg.weight_decay * p
        v = velocity.get(name)
        v = g if v is None else cfg.momentum * v + g
        velocity[name] = v
        p -= (lr * v).astype(p.dtype, copy=False)


class SGD:
    """Momentum SGD over a module's named parameters."""

    def __init__(self, model: Module, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, epoch: int) -> None:
        named = dict(self.model.named_parameters())
        sgd_step(
            {k: p.data for k, p in named.items()},
            {k: p.grad for k, p in named.items()},
            self.velocity,
            self.cfg,
            epoch,
        )


class EarlyStopping:
    """Stop once the metric has not beaten the best so far by more than
    ``min_delta`` for ``patience`` consecutive epochs."""

    def __init__(self, patience: int = 5, min_delta: float = 0.0):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.min_delta = min_delta
        self.best = -math.inf
        self.best_epoch = 0
        self.bad = 0
        self.epoch = 0

    def update(self, metric: float) -> bool:
        """Record one epoch; return True when training should stop."""
        self.epoch += 1
        if metric > self.best + self.min_delta:
            self.best = metric
            self.best_epoch = self.epoch
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_top1: float
    val_top5: float
    stopped: bool = False


LOG_FIELDS = ("epoch", "lr", "train_loss", "val_top1", "val_top5", "stopped")


def header_lines(meta: Mapping[str, object]) -> str:
    lines = [f"# at3d {__version__}"]
    lines += [f"# {k}={v}" for k, v in meta.items()]
    return "\n".join(lines) + "\n"


def epoch_log_csv(logs: Sequence[EpochLog], meta: Mapping[str, object] | None = None) -> str:
    buf = io.StringIO()
    buf.write(header_lines(meta or {}))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for e in logs:
        w.writerow([e.epoch, f"{e.lr:.10g}", f"{e.train_loss:.6f}", f"{e.val_top1:.2f}",
                    f"{e.val_top5:.2f}", int(e.stopped)])
    return buf.getvalue()


def write_epoch_log(logs: Sequence[EpochLog], path, meta: Mapping[str, object] | None = None) -> None:
    atomic_write(path, epoch_log_csv(logs, meta))


def read_epoch_log(path) -> list[EpochLog]:
    with open(path, encoding="utf-8") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [
            EpochLog(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]),
                     float(r["val_top1"]), float(r["val_top5"]), bool(int(r["stopped"])))
            for r in rows
        ]


# -- metrics -----------------------------------------------------------

def _ranked(probs: np.ndarray) -> np.ndarray:
    # stable sort of negated scores: ties keep the lowest class index first
    return np.argsort(-probs, axis=1, kind="stable")


def topk(probs, labels, k: int) -> float:
    """Percentage of rows whose label is among the ``k`` highest scores."""
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2:
        raise ConfigError(f"expected [N, K] scores, got shape {probs.shape}")
    if not 1 <= k <= probs.shape[1]:
        raise ConfigError(f"k must lie in [1, {probs.shape[1]}], got {k}")
    if len(labels) == 0:
        return 0.0
    hits = (_ranked(probs)[:, :k] == labels[:, None]).any(axis=1)
    return float(100.0 * hits.mean())


@dataclass
class Metrics:
    top1: float
    top5: float
    per_class: np.ndarray
    confusion: np.ndarray
    probs: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 0)))

    @property
    def counts(self) -> np.ndarray:
        return self.confusion.sum(axis=1)


def metrics_from_probs(probs, labels, num_classes: int) -> Metrics:
    """Top-1/top-5 (top-5 capped at K), per-class accuracy in percent (NaN
    for classes without samples) and the confusion matrix (rows = truth)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape != (len(labels), num_classes):
        raise ConfigError(f"scores shape {probs.shape} does not match {len(labels)} x {num_classes}")
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    pred = _ranked(probs)[:, 0] if len(labels) else labels
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    counts = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = 100.0 * np.diag(confusion) / counts
    return Metrics(
        topk(probs, labels, 1),
        topk(probs, labels, min(5, num_classes)),
        per_class,
        confusion,
        probs,
    )


def evaluate(
    model: Callable[[Tensor], Tensor],
    samples: Sequence[Sample],
    pcfg: PipelineConfig,
    seed: int,
    num_classes: int,
) -> Metrics:
    """Three-clip protocol: softmax of each clip, averaged per video.

    Clip starts for video ``i`` come from stream ``(seed, EVAL, i)``.
    """
    if isinstance(model, Module):
        model.eval()
    labels = []
    probs = np.zeros((len(samples), num_classes))
    with no_grad():
        for i, (video, label) in enumerate(samples):
            if not 0 <= label < num_classes:
                raise LabelError(f"label {label} of {video.id} outside [0, {num_classes})")
            clips = eval_clips(video, pcfg, rng.stream(seed, rng.EVAL, i))
            logits = model(stack([c.data for c in clips]))
            probs[i] = softmax(logits, -1).data.astype(np.float64).mean(axis=0)
            labels.append(label)
    return metrics_from_probs(probs, labels, num_classes)


# -- training ----------------------------------------------------------

@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    logs: list[EpochLog]
    best_metrics: Metrics | None = None


def _reseed_dropout(model: Module, seed: int, epoch: int, step: int) -> None:
    for j, (_, m) in enumerate(model.named_modules()):
        if isinstance(m, Dropout):
            m.gen = rng.stream(seed, rng.DROPOUT, epoch, step, j)


def train_epoch(
    model: Module,
    samples: Sequence[Sample],
    opt: SGD,
    pcfg: PipelineConfig,
    seed: int,
    epoch: int,
) -> float:
    """One pass in stream-defined order; returns the mean batch loss.

    Sample ``i`` of epoch ``e`` is drawn from stream ``(seed, SAMPLE, e, i)``
    so the clip does not depend on batch composition.
    """
    if not samples:
        raise DataError("training split is empty")
    model.train()
    order = rng.stream(seed, rng.ORDER, epoch).permutation(len(samples))
    bs = opt.cfg.batch_size
    losses = []
    for step, lo in enumerate(range(0, len(order), bs)):
        idx = order[lo : lo + bs]
        clips = [train_sample(samples[i][0], pcfg, rng.stream(seed, rng.SAMPLE, epoch, int(i))) for i in idx]
        labels = [samples[i][1] for i in idx]
        _reseed_dropout(model, seed, epoch, step)
        model.zero_grad()
        with Tape():
            loss = F.cross_entropy(model(stack([c.data for c in clips])), labels)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}", stage="loss")
            backward(loss)
        opt.step(epoch)
        losses.append(float(loss.data))
    return float(np.mean(losses))


def train_loop(
    model: Module,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    cfg: TrainConfig,
    pcfg: PipelineConfig,
    seed: int,
    num_classes: int,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Train until early stopping or ``max_epochs``.  The model is left
    holding the best-validation weights, which are also returned."""
    if not train_set or not val_set:
        raise DataError("training and validation splits must be non-empty")
    ids_train = {v.id for v, _ in train_set}
    if ids_train & {v.id for v, _ in val_set}:
        raise DataError("training and validation splits overlap")
    opt = SGD(model, cfg)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    logs: list[EpochLog] = []
    best_state, best_top1, best_epoch, best_metrics = None, -math.inf, 0, None
    for epoch in range(1, cfg.max_epochs + 1):
        loss = train_epoch(model, train_set, opt, pcfg, seed, epoch)
        m = evaluate(model, val_set, pcfg, seed, num_classes)
        if m.top1 > best_top1:
            best_top1, best_epoch, best_metrics = m.top1, epoch, m
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        stop = stopper.update(m.top1)
        log = EpochLog(epoch, lr_at(epoch, cfg), loss, m.top1, m.top5, stop)
        logs.append(log)
        if on_epoch is not None:
            on_epoch(log)
        if stop:
            break
    model.load_state_dict(best_state)
    return TrainResult(best_state, best_epoch, logs, best_metrics)


def train_config_dict(cfg: TrainConfig) -> dict[str, object]:
    return asdict(cfg)


def pipeline_config_dict(cfg: PipelineConfig) -> dict[str, object]:
    return asdict(cfg)


def samples_from(videos: Iterable[RawVideo], labels: Iterable[int]) -> list[Sample]:
    return list(zip(videos, labels))
