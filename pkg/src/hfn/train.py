"""Training loop for the four regimes and top-1 evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .compress import save_checkpoint
from .data import Dataset, augment
from .model import METHODS, Model
from .rng import STREAM_AUGMENT, STREAM_SHUFFLE, RngStream

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    method: str = "hfn"
    epochs: int = 200
    batch_size: int = 128
    base_lr: float = 0.1
    warmup_epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    eval_cadence: int = 1
    augment: bool = True
    crop_pad: int = 4
    flip: bool = True

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.epochs < 1 or self.batch_size < 2 or self.eval_cadence < 1:
            raise ValueError("epochs, batch_size and eval_cadence must be positive (batch_size >= 2)")
        if self.epochs <= self.warmup_epochs:
            raise ValueError("epochs must exceed warmup_epochs")
        return self


@dataclass
class TrainResult:
    history: list
    best_checkpoint: bytes | None
    best_epoch: int
    best_val: float
    weights_checksum: str
    extra: dict = field(default_factory=dict)


def evaluate(model: Model, ds: Dataset, batch_size=256) -> float:
    """Top-1 accuracy in eval mode. Rows with non-finite logits count as wrong."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty split")
    correct = 0
    for start in range(0, len(ds), batch_size):
        x = augment(ds.images[start : start + batch_size], ds, "eval")
        logits = model.forward(x, "eval")
        ok = np.isfinite(logits).all(axis=1)
        pred = np.argmax(np.where(np.isfinite(logits), logits, -np.inf), axis=1)
        correct += int(((pred == ds.labels[start : start + batch_size]) & ok).sum())
    return correct / len(ds)


def _step(model: Model, params, velocity, lr, cfg: TrainConfig):
    for name, p, g in params:
        ops.sgd_step(p, g, velocity[name], lr, cfg.momentum, cfg.weight_decay)
    model.invalidate_masks()


def train(model: Model, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Mini-batch SGD on the method's trainable set.

    ``on_epoch(record)`` is called after every epoch with the history entry.
    The best checkpoint (highest validation top-1, earliest on ties) is kept
    as serialized bytes.
    """
    cfg.validate()
    if cfg.method != model.config.method:
        raise ValueError(f"train config method {cfg.method!r} != model method {model.config.method!r}")
    masked = model.config.masked
    frozen = model.weights_checksum() if masked else None
    scores0 = model.scores_checksum() if not masked else None
    params = model.trainable()
    velocity = {name: np.zeros_like(p) for name, p, _ in params}
    shuffle_rng = RngStream(cfg.seed, STREAM_SHUFFLE)
    aug_rng = RngStream(cfg.seed, STREAM_AUGMENT)
    n = len(train_ds)
    history, best = [], (None, -1, -1.0)
    for epoch in range(cfg.epochs):
        lr = ops.lr_schedule(epoch, cfg.epochs, cfg.base_lr, cfg.warmup_epochs)
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n - 1, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            raw = train_ds.images[idx]
            if cfg.augment:
                x = augment(raw, train_ds, "train", aug_rng, cfg.crop_pad, cfg.flip)
            else:
                x = augment(raw, train_ds, "eval")
            model.zero_grad()
            logits = model.forward(x, "train")
            loss, grad = ops.softmax_cross_entropy(logits, train_ds.labels[idx])
            if not math.isfinite(loss):
                model.clear_tape()
                raise NumericalError(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            model.backward(grad)
            _step(model, params, velocity, lr, cfg)
            total += loss * len(idx)
            seen += len(idx)
        if masked and model.weights_checksum() != frozen:
            raise RuntimeError("frozen weights changed during supermask training")
        if not masked and model.scores_checksum() != scores0:
            raise RuntimeError("scores changed during weight training")
        record = dict(epoch=epoch, lr=lr, loss=total / max(seen, 1), val_top1=None)
        if (epoch + 1) % cfg.eval_cadence == 0 or epoch == cfg.epochs - 1:
            record["val_top1"] = evaluate(model, val_ds)
            if record["val_top1"] > best[2]:
                state = dict(epoch=epoch, val_top1=record["val_top1"], train_config=asdict(cfg))
                best = (save_checkpoint(model, state), epoch, record["val_top1"])
        history.append(record)
        log.info("epoch %d lr %.5f loss %.4f val %s", epoch, lr, record["loss"], record["val_top1"])
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(history, best[0], best[1], best[2], model.weights_checksum())


def initial_loss(model: Model, ds: Dataset, batch_size=256) -> float:
    """Mean train-mode loss before any update; BN running stats are restored."""
    saved = [(bn.state.running_mean.copy(), bn.state.running_var.copy()) for bn in model.bn_layers()]
    total = 0.0
    for start in range(0, len(ds), batch_size):
        x = augment(ds.images[start : start + batch_size], ds, "eval")
        logits = model.forward(x, "train")
        loss, _ = ops.softmax_cross_entropy(logits, ds.labels[start : start + batch_size])
        total += loss * len(x)
    model.clear_tape()
    for bn, (m, v) in zip(model.bn_layers(), saved):
        bn.state.running_mean[...] = m
        bn.state.running_var[...] = v
    return total / len(ds)
