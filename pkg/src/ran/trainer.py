"""Grid cross-entropy, learning-rate schedule and the mini-batch Adam loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .evaluate import confusion_at, prf1
from .params import adam_step, rng_for, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "train_loss", "train_f1", "val_loss", "val_f1")
PROB_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "ran-lstm"
    batch_size: int = 10
    lr: float = 1e-4
    lr_decay: float = 0.5
    decay_every: int = 2
    epochs: int = 25
    seed: int = 0
    mask_loss: bool = True
    patience: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")

    @classmethod
    def for_model(cls, kind, **overrides):
        if kind == "ran-lstm":
            base = cls("ran-lstm", batch_size=10, lr=1e-4, lr_decay=0.5, decay_every=2, epochs=25)
        elif kind == "ran-cnn":
            base = cls("ran-cnn", batch_size=64, lr=1e-4, lr_decay=1.0, epochs=10, patience=3)
        elif kind == "encoder":
            base = cls("encoder", batch_size=64, lr=1e-3, lr_decay=1.0, epochs=5)
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        return replace(base, **overrides)


def lr_schedule(epoch, config):
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.lr * config.lr_decay ** (epoch // config.decay_every)


def _mask_for(labels, mask):
    return np.ones(np.shape(labels), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)


def grid_cross_entropy(probs, labels, mask=None):
    """Mean negative log-probability of the true class over masked-in cells."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size and (probs.min() < 0 or probs.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    labels = np.asarray(labels)
    mask = _mask_for(labels, mask)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss mask selects no cells")
    p_true = np.take_along_axis(probs, labels[..., None].astype(np.int64), axis=-1)[..., 0]
    return float(-np.log(np.maximum(p_true[mask], PROB_FLOOR)).sum() / count)


def softmax_cross_entropy(logits, labels, mask=None):
    """Loss and its gradient w.r.t. ``logits``: ``(softmax - onehot) / |mask|`` on included cells."""
    labels = np.asarray(labels).astype(np.int64)
    mask = _mask_for(labels, mask)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss mask selects no cells")
    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - log_norm
    nll = -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = float(nll[mask].sum() / count)
    grad = np.exp(logp)
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], axis=-1) - 1, axis=-1)
    grad *= (mask / logits.dtype.type(count))[..., None].astype(logits.dtype)
    return loss, grad


def loss_closure(model, x, labels, mask=None, mode="infer", dropout_seed=None):
    """``store -> (loss, grads)`` for gradient checking.

    With ``mode="train"`` the dropout masks are frozen by reseeding each call.
    """
    def run(store):
        rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
        logits, cache = model.forward(store, x, mode, rng)
        loss, dlogits = softmax_cross_entropy(logits, labels, mask)
        return loss, model.backward(store, dlogits, cache)
    return run


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray | None = None

    def __len__(self):
        return len(self.x)

    def batch(self, idx):
        m = None if self.mask is None else self.mask[idx]
        return self.x[idx], self.y[idx], m


@dataclass
class TrainResult:
    params: object
    log: list = field(default_factory=list)
    best_epoch: int | None = None


def predict_probs(model, params, x, batch_size=64):
    """Tumour probability per cell (infer mode)."""
    out = []
    for lo in range(0, len(x), batch_size):
        logits, _ = model.forward(params, x[lo:lo + batch_size], "infer")
        out.append(T.softmax(logits)[..., 1])
    return np.concatenate(out) if out else np.zeros((0,))


def _f1_at_half(probs, labels, mask):
    tp, fp, fn, _ = confusion_at(probs, labels, mask, 0.5)
    return prf1(tp, fp, fn)[2]


def _evaluate(model, params, data, batch_size):
    losses, weights, probs = [], [], []
    for lo in range(0, len(data), batch_size):
        x, y, m = data.batch(slice(lo, lo + batch_size))
        logits, _ = model.forward(params, x, "infer")
        loss, _ = softmax_cross_entropy(logits, y, m)
        losses.append(loss)
        weights.append(int(_mask_for(y, m).sum()))
        probs.append(T.softmax(logits)[..., 1])
    p = np.concatenate(probs)
    return float(np.dot(losses, weights) / sum(weights)), _f1_at_half(p, data.y, _mask_for(data.y, data.mask))


def train(model, data, config, params=None, val=None, out_dir=None, prefix="model"):
    """Mini-batch Adam on the masked cross-entropy.

    Writes ``{prefix}_log.csv`` and ``{prefix}_epoch{k}.ckpt`` into ``out_dir``
    when given.  With ``config.patience`` and a validation set, training stops
    after that many epochs without a val-F1 improvement and the best epoch's
    parameters are returned.
    """
    if len(data) == 0:
        raise TrainingError("empty training set")
    if params is None:
        params = model.init_params(config.seed)
    order_rng = rng_for(config.seed, "train.order")
    drop_rng = rng_for(config.seed, "train.dropout")
    use_mask = data.mask if config.mask_loss else None
    result = TrainResult(params)
    best = (-1.0, None, None)
    stale = 0
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, f"{prefix}_log.csv")
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_FIELDS)
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        order = order_rng.permutation(len(data))
        total, count = 0.0, 0
        tp = fp = fn = 0
        for bi, lo in enumerate(range(0, len(data), config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            x, y, m = data.x[idx], data.y[idx], None if use_mask is None else use_mask[idx]
            logits, cache = model.forward(params, x, "train", drop_rng)
            loss, dlogits = softmax_cross_entropy(logits, y, m)
            if not math.isfinite(loss):
                if out_dir:
                    np.savez(os.path.join(out_dir, f"{prefix}_nan_batch.npz"), x=x, y=y, idx=idx)
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            params.set_grads(model.backward(params, dlogits, cache))
            adam_step(params, lr)
            cells = int(_mask_for(y, m).sum())
            total += loss * cells
            count += cells
            b_tp, b_fp, b_fn, _ = confusion_at(T.softmax(logits)[..., 1], y, _mask_for(y, m), 0.5)
            tp, fp, fn = tp + b_tp, fp + b_fp, fn + b_fn
        row = {"epoch": epoch, "lr": lr, "train_loss": total / count, "train_f1": prf1(tp, fp, fn)[2],
               "val_loss": "", "val_f1": ""}
        if val is not None and len(val):
            row["val_loss"], row["val_f1"] = _evaluate(model, params, val, max(config.batch_size, 32))
        result.log.append(row)
        log.info("%s epoch %d lr=%g loss=%.5f f1=%.4f val_f1=%s", prefix, epoch, lr,
                 row["train_loss"], row["train_f1"], row["val_f1"])
        if out_dir:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[k]) for k in LOG_FIELDS])
            save_checkpoint(params, os.path.join(out_dir, f"{prefix}_epoch{epoch}.ckpt"))
        if config.patience and val is not None and len(val):
            if row["val_f1"] > best[0]:
                best = (row["val_f1"], params.copy(), epoch)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if best[1] is not None:
        result.params, result.best_epoch = best[1], best[2]
    else:
        result.params = params
    return result


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
