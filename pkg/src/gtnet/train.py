"""Training and evaluation loops shared by the CLI and the ablation driver."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics as M
from .data import AugmentConfig, Dataset, augment
from .model import GTNet, ModelConfig, loss, predict_labels
from .numerics import BatchNorm, backward, sgd_step

log = logging.getLogger(__name__)


def stack_batch(items: Sequence, dtype) -> np.ndarray:
    sizes = {it.n for it in items}
    if len(sizes) != 1:
        raise ValueError(f"clouds in a batch must share N, got {sorted(sizes)}")
    return np.stack([it.features() for it in items]).astype(dtype)


def targets_of(items: Sequence, task: str) -> np.ndarray:
    if task == "classification":
        if any(it.shape_label is None for it in items):
            raise ValueError("classification needs a shape label on every cloud")
        return np.array([it.shape_label for it in items], dtype=np.int64)
    if any(it.point_labels is None for it in items):
        raise ValueError("segmentation needs per-point labels on every cloud")
    return np.stack([it.point_labels for it in items])


def categories_of(items: Sequence, config: ModelConfig) -> Optional[np.ndarray]:
    if config.task != "part_segmentation":
        return None
    if any(it.category is None for it in items):
        raise ValueError("part segmentation needs a category on every cloud")
    return np.array([it.category for it in items], dtype=np.int64)


def batch_slices(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> list[np.ndarray]:
    """Shuffled (if ``rng``) index groups; a trailing single-cloud batch is
    folded into the previous one so batch statistics stay defined."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    groups = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(groups) > 1 and len(groups[-1]) == 1:
        groups[-2] = np.concatenate([groups[-2], groups.pop()])
    return groups


def train_epoch(model: GTNet, ds: Dataset, epoch: int, rng: np.random.Generator,
                augment_config: AugmentConfig = AugmentConfig()) -> float:
    cfg = model.config
    model.train()
    params = model.parameters()
    total, count = 0.0, 0
    for group in batch_slices(len(ds), cfg.batch_size, rng):
        items = [ds.items[i] for i in group]
        if augment_config.enabled:
            items = [augment(it, augment_config, int(rng.integers(2**31))) for it in items]
        x = stack_batch(items, cfg.np_dtype)
        model.zero_grad()
        out = loss(model(x, categories_of(items, cfg)), targets_of(items, cfg.task), cfg.label_smoothing)
        backward(out)
        sgd_step(params, cfg.optimizer, epoch)
        total += float(out.data) * len(items)
        count += len(items)
    return total / count


def recalibrate_batch_norm(model: GTNet, ds: Dataset, rng: Optional[np.random.Generator] = None,
                           batch_size: Optional[int] = None) -> None:
    """Re-estimate every batch-norm's running statistics under the current
    weights: one pass over ``ds`` with batch statistics, averaged over batches.

    The momentum estimates lag badly when weights move fast, which leaves
    eval-mode predictions far behind train-mode ones on small datasets. Pass
    ``rng`` to shuffle: datasets stored class by class otherwise yield
    single-class batches whose statistics understate the spread.
    """
    cfg = model.config
    norms = [m for _, m in model.named_modules() if isinstance(m, BatchNorm)]
    momenta = [b.momentum for b in norms]
    model.eval()
    for b in norms:
        b.training = True
        b.running_mean[...] = 0.0
        b.running_var[...] = 1.0
    try:
        for i, group in enumerate(batch_slices(len(ds), batch_size or cfg.batch_size, rng)):
            for b in norms:
                b.momentum = 1.0 / (i + 1)  # cumulative average
            items = [ds.items[j] for j in group]
            model(stack_batch(items, cfg.np_dtype), categories_of(items, cfg))
    finally:
        for b, m in zip(norms, momenta):
            b.momentum = m
        model.eval()


@dataclass
class EvalReport:
    task: str
    num_samples: int
    oa: float
    macc: float
    miou: Optional[float] = None
    per_category: dict = field(default_factory=dict)
    confusion: Optional[M.ConfusionMatrix] = None
    predictions: list = field(default_factory=list)


def evaluate(model: GTNet, ds: Dataset, batch_size: Optional[int] = None,
             keep_predictions: bool = False) -> EvalReport:
    cfg = model.config
    model.eval()
    k = cfg.num_classes if cfg.task == "classification" else cfg.num_parts
    cm = M.ConfusionMatrix(k)
    parts = cfg.category_parts or ds.category_parts
    part_acc = M.PartIoUAccumulator(parts) if cfg.task == "part_segmentation" and parts else None
    preds_out = []
    for group in batch_slices(len(ds), batch_size or cfg.batch_size, None):
        items = [ds.items[i] for i in group]
        cats = categories_of(items, cfg)
        logits = model(stack_batch(items, cfg.np_dtype), cats).data
        preds = predict_labels(logits, cats, parts if part_acc else None)
        targets = targets_of(items, cfg.task)
        cm.accumulate(targets, preds)
        if part_acc is not None:
            for c, t, p in zip(cats, targets, preds):
                part_acc.add(int(c), t, p)
        if keep_predictions:
            preds_out.extend(list(preds))
    report = EvalReport(cfg.task, cm.total if cfg.task == "classification" else len(ds),
                        M.overall_accuracy(cm), M.mean_class_accuracy(cm), confusion=cm,
                        predictions=preds_out)
    if part_acc is not None:
        report.per_category, report.miou = part_acc.result()
    elif cfg.task != "classification":
        per, report.miou = M.semantic_miou(cm)
        report.per_category = {i: v for i, v in enumerate(per) if v is not None}
    return report


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    train_oa: float
    val_oa: Optional[float] = None
    val_miou: Optional[float] = None

    def line(self) -> str:
        parts = [f"epoch={self.epoch}", f"lr={self.lr:.6g}", f"loss={self.loss:.6f}",
                 f"train_oa={self.train_oa:.4f}"]
        if self.val_oa is not None:
            parts.append(f"val_oa={self.val_oa:.4f}")
        if self.val_miou is not None:
            parts.append(f"val_miou={self.val_miou:.4f}")
        return " ".join(parts)


def fit(model: GTNet, train_ds: Dataset, val_ds: Optional[Dataset] = None, *,
        epochs: Optional[int] = None, stop_at_train_oa: Optional[float] = None,
        on_epoch: Optional[Callable[[EpochLog, GTNet], None]] = None,
        augment_config: AugmentConfig = AugmentConfig()) -> list[EpochLog]:
    """Train for ``epochs`` (default: config) epochs, scoring train accuracy in
    eval mode after every epoch. Stops early once train OA reaches
    ``stop_at_train_oa``."""
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng([cfg.seed, 2])
    recal_rng = np.random.default_rng([cfg.seed, 3])
    history = []
    for epoch in range(epochs):
        lr = cfg.optimizer.lr_at(epoch)
        mean_loss = train_epoch(model, train_ds, epoch, rng, augment_config)
        if not math.isfinite(mean_loss):
            raise FloatingPointError(f"loss became non-finite at epoch {epoch}")
        if cfg.recalibrate_bn:
            recalibrate_batch_norm(model, train_ds, recal_rng)
        train_rep = evaluate(model, train_ds)
        entry = EpochLog(epoch, lr, mean_loss, train_rep.oa)
        if val_ds is not None:
            val_rep = evaluate(model, val_ds)
            entry.val_oa, entry.val_miou = val_rep.oa, val_rep.miou
        history.append(entry)
        log.info(entry.line())
        if on_epoch is not None:
            on_epoch(entry, model)
        if stop_at_train_oa is not None and train_rep.oa >= stop_at_train_oa:
            break
    return history
