"""Training loop, losses, optimizers, metrics and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, DivergenceError, ValidationError
from .graph import BrainGraph, GraphDataset, validate
from .model import (
    AdiagModel,
    ModelConfig,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    predict,
)

log = logging.getLogger(__name__)

CSV_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    lr: float = 1e-3
    lr_schedule: str = "step"
    lr_gamma: float = 0.5
    lr_every: int = 50
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    val_fraction: float = 0.2
    seed: int = 0
    use_batchnorm: bool = True
    activation: str = "sigmoid"
    aggregator: str = "weighted"
    hidden: int = 64
    lambda_lp: float = 0.0
    lambda_ent: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        # lr = 0 is allowed as a null-update control
        if not (self.lr >= 0.0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be a finite nonnegative number, got {self.lr}")
        if self.lr_schedule not in ("constant", "step"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'step', got {self.lr_schedule!r}")
        if self.lr_every < 1 or not 0.0 < self.lr_gamma <= 1.0:
            raise ConfigError("step schedule needs lr_every >= 1 and 0 < lr_gamma <= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_lp < 0 or self.lambda_ent < 0:
            raise ConfigError("auxiliary loss weights must be nonnegative")

    def model_config(self, n_nodes: int) -> ModelConfig:
        return ModelConfig(n_nodes=n_nodes, hidden=self.hidden, activation=self.activation,
                           aggregator=self.aggregator, use_batchnorm=self.use_batchnorm)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def sub_seed(seed: int, tag: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & (2**64 - 1), *tag.encode("ascii")])


# ---------------------------------------------------------------- losses

def bce_loss(logit: Tensor, y: int) -> Tensor:
    return ad.bce_with_logits(logit, float(y))


def aux_losses(S: Tensor, A: Tensor) -> tuple[Tensor, Tensor]:
    """Link-prediction and assignment-entropy regularizers for one pooling step."""
    n = S.shape[0]
    l_lp = ad.mul(ad.frobenius(ad.sub(A, S @ S.T)), 1.0 / (n * n))
    l_ent = ad.row_entropy_mean(S)
    return l_lp, l_ent


# ---------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, params: Sequence[Tensor]):
        self.params = list(params)

    def step(self, lr: float) -> None:
        for p in self.params:
            p.data = p.data - lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return cfg.lr * cfg.lr_gamma ** ((epoch - 1) // cfg.lr_every)


# ---------------------------------------------------------------- metrics

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class MetricsHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def best(self) -> EpochRecord:
        return self.records[self.best_epoch - 1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.train_loss:.6g},{r.train_acc:.6g},{r.val_loss:.6g},{r.val_acc:.6g}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    confusion: np.ndarray  # rows: true label, cols: predicted label
    logits: np.ndarray

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def confusion_accuracy(confusion: np.ndarray) -> float:
    total = confusion.sum()
    return float(1.0 - (confusion[0, 1] + confusion[1, 0]) / total) if total else 0.0


def _mean(values: Sequence[float]) -> float:
    # fsum: order-independent, so shuffling cannot perturb the reported loss
    return math.fsum(values) / len(values) if values else float("nan")


def evaluate(model: AdiagModel, graphs: Sequence[BrainGraph]) -> EvalResult:
    """Eval-mode forward over ``graphs``."""
    graphs = list(graphs)
    if not graphs:
        raise ValidationError("cannot evaluate on an empty dataset")
    confusion = np.zeros((2, 2), dtype=np.int64)
    losses, logits = [], []
    with ad.no_grad():
        for g in graphs:
            if g.n_nodes != model.config.n_nodes:
                raise DimensionError(
                    f"graph {g.subject_id!r} has {g.n_nodes} nodes, checkpoint expects {model.config.n_nodes}"
                )
            logit = model.forward(g, "eval").logit
            z = logit.item()
            logits.append(z)
            losses.append(bce_loss(logit, g.label).item())
            confusion[g.label, predict(z)] += 1
    return EvalResult(confusion_accuracy(confusion), _mean(losses), confusion, np.array(logits))


# ---------------------------------------------------------------- training

def stratified_split(labels: Sequence[int], val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random split; every class keeps at least one graph on each side."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(sub_seed(seed, "split"))
    train, val = [], []
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        n_val = int(round(val_fraction * idx.size))
        n_val = min(max(n_val, 1), idx.size - 1)
        val.extend(idx[:n_val].tolist())
        train.extend(idx[n_val:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(val), dtype=np.int64)


@dataclass
class TrainResult:
    checkpoint: bytes
    history: MetricsHistory
    model: AdiagModel
    train_idx: np.ndarray
    val_idx: np.ndarray

    def best_model(self) -> AdiagModel:
        return checkpoint_from_bytes(self.checkpoint)


def batch_loss(model: AdiagModel, graphs: Sequence[BrainGraph], cfg: TrainConfig) -> tuple[list[Tensor], list[float]]:
    """Training-mode loss of each graph in a batch, and the logits."""
    losses, logits = [], []
    for g, res in zip(graphs, model.forward_batch(graphs, "train")):
        loss = bce_loss(res.logit, g.label)
        if cfg.lambda_lp or cfg.lambda_ent:
            for S, A in zip(res.assignments, res.pool_inputs):
                l_lp, l_ent = aux_losses(S, A)
                if cfg.lambda_lp:
                    loss = loss + ad.mul(l_lp, cfg.lambda_lp)
                if cfg.lambda_ent:
                    loss = loss + ad.mul(l_ent, cfg.lambda_ent)
        losses.append(loss)
        logits.append(res.logit.item())
    return losses, logits


def accumulate_gradients(model: AdiagModel, graphs: Sequence[BrainGraph], cfg: TrainConfig) -> list[tuple[float, float]]:
    """Add the gradient of the summed batch loss into the parameters' ``grad``.

    The batch shares one forward pass because batch norm pools its statistics
    over all graphs in the batch. Returns (loss, logit) per graph.
    """
    with ad.Tape() as tape:
        losses, logits = batch_loss(model, graphs, cfg)
        total = losses[0]
        for loss in losses[1:]:
            total = total + loss
    tape.backward(total)
    return [(loss.item(), z) for loss, z in zip(losses, logits)]


def _check_dataset(dataset: GraphDataset) -> None:
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    for g in dataset:
        problems = validate(g)
        if problems:
            raise ValidationError(f"graph {g.subject_id!r}: {'; '.join(problems)}")
    counts = np.bincount(dataset.labels, minlength=2)
    if counts.min() == 0:
        raise ConfigError("dataset contains a single class; need both AD and NC graphs")
    if counts.min() < 2:
        raise ConfigError(f"need at least 2 graphs per class, got {counts.tolist()}")


def train(dataset: GraphDataset, cfg: TrainConfig, progress=None) -> TrainResult:
    """Fit a fresh model on a stratified split of ``dataset``.

    Batch-norm running statistics are the exact average over the current
    epoch's training passes, so they do not depend on the order of batches.
    """
    _check_dataset(dataset)
    graphs = list(dataset)
    model = AdiagModel(cfg.model_config(dataset.n_nodes),
                       seed=int(np.random.default_rng(sub_seed(cfg.seed, "model")).integers(2**63)),
                       bn_momentum=None)
    train_idx, val_idx = stratified_split(dataset.labels, cfg.val_fraction, cfg.seed)
    shuffle = np.random.default_rng(sub_seed(cfg.seed, "shuffle"))
    params = model.parameters()
    if cfg.optimizer == "adam":
        opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    else:
        opt = SGD(params)

    history = MetricsHistory()
    best_acc = -1.0
    checkpoint = b""
    val_graphs = [graphs[i] for i in val_idx]
    # Batch membership is drawn once: batch norm couples the graphs of a batch,
    # so regrouping them each epoch would change the loss even at lr = 0.
    # Only the order in which batches are visited is reshuffled per epoch.
    order = shuffle.permutation(train_idx)
    batches = [order[lo:lo + cfg.batch_size] for lo in range(0, order.size, cfg.batch_size)]
    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate(cfg, epoch)
        model.reset_running_stats()
        losses, correct = [], 0
        for b in shuffle.permutation(len(batches)):
            batch = [graphs[i] for i in batches[b]]
            model.zero_grad()
            for g, (loss, z) in zip(batch, accumulate_gradients(model, batch, cfg)):
                if not math.isfinite(loss):
                    raise DivergenceError(epoch, f"non-finite loss on {g.subject_id!r} at epoch {epoch}")
                losses.append(loss)
                correct += predict(z) == g.label
            scale = 1.0 / len(batch)
            for p in params:
                p.grad = p.grad * scale
            opt.step(lr)
        for p in params:
            if not np.all(np.isfinite(p.data)):
                raise DivergenceError(epoch, f"parameter {p.name} became non-finite at epoch {epoch}")
        val = evaluate(model, val_graphs)
        rec = EpochRecord(epoch, _mean(losses), correct / order.size, val.mean_loss, val.accuracy)
        history.records.append(rec)
        if rec.val_acc > best_acc:
            best_acc = rec.val_acc
            history.best_epoch = epoch
            checkpoint = checkpoint_to_bytes(model)
        log.debug("epoch %d lr %.3g train_loss %.4f train_acc %.3f val_loss %.4f val_acc %.3f",
                  epoch, lr, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc)
        if progress is not None:
            progress(rec)
    return TrainResult(checkpoint, history, model, train_idx, val_idx)


def threshold_baseline(dataset: GraphDataset, train_idx, val_idx) -> float:
    """Validation accuracy of a mean-edge-weight threshold fitted on the training split.

    Predicts AD below the threshold; the threshold is the midpoint between the
    class means of the training graphs. Entirely independent of the network.
    """
    w = np.array([g.W.sum() / max(g.n_nodes * (g.n_nodes - 1), 1) for g in dataset])
    y = dataset.labels
    tr = np.asarray(train_idx)
    mu_ad = w[tr][y[tr] == 1].mean()
    mu_nc = w[tr][y[tr] == 0].mean()
    cut = 0.5 * (mu_ad + mu_nc)
    ad_below = mu_ad < mu_nc
    va = np.asarray(val_idx)
    pred = (w[va] < cut) if ad_below else (w[va] >= cut)
    return float(np.mean(pred.astype(int) == y[va]))
