"""Loss, metric, optimizer, learning-rate schedule, and the training loop.

The loop is a pure function of (initial parameters, dataset order, seed):
identical seeds replay bit-identically on the same machine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .config import TrainConfig
from .errors import EmptyDataset, NonFiniteGradient, ShapeMismatch


def dice_score(pred, gt) -> float:
    """Overlap score 2|P&G| / (|P|+|G|) for binary masks; both empty gives 1.0."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred != 0
    g = gt != 0
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def composite_loss(logits: Tensor, gt: Tensor,
                   lambda_bce: float = 0.5, lambda_dice: float = 0.5) -> Tensor:
    """Weighted mean binary cross-entropy plus soft-Dice loss (smoothing 1.0)."""
    if logits.shape != gt.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs target {tuple(gt.shape)}")
    gt = gt.to(logits.dtype)
    # softplus(z) - z*y is the stable form of -[y log p + (1-y) log(1-p)]
    bce = (torch.nn.functional.softplus(logits) - logits * gt).mean()
    p = torch.sigmoid(logits)
    smooth = 1.0
    soft_dice = (2.0 * (p * gt).sum() + smooth) / (p.sum() + gt.sum() + smooth)
    return lambda_bce * bce + lambda_dice * (1.0 - soft_dice)


def sgd_update(params, grads, lr: float):
    """Plain gradient step theta <- theta - lr * g, in place, no momentum."""
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is None:
                continue
            if p.shape != g.shape:
                raise ShapeMismatch(f"param {tuple(p.shape)} vs grad {tuple(g.shape)}")
            p.sub_(lr * g)


class SGD:
    """Minimal SGD with an optional classical momentum knob (0 = plain)."""

    def __init__(self, params, lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [torch.zeros_like(p) for p in self.params] if momentum else None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        with torch.no_grad():
            if self._velocity is None:
                sgd_update(self.params, [p.grad for p in self.params], self.lr)
                return
            for p, v in zip(self.params, self._velocity):
                if p.grad is None:
                    continue
                v.mul_(self.momentum).add_(p.grad)
                p.sub_(self.lr * v)


@dataclass
class TrainState:
    """Mutable schedule state threaded through the epochs."""

    lr: float
    epoch: int = 0
    best_dice: float | None = None
    stale_epochs: int = 0


def lr_on_validation(state: TrainState, val_dice: float, cfg: TrainConfig) -> TrainState:
    """Update the record/lr after one validation pass.

    Under the "record" policy the first validation only sets the baseline;
    each later strict improvement sets the record and multiplies lr by the
    decay factor. The "plateau" policy instead decays after plateau_patience
    consecutive non-improving validations.
    """
    improved = state.best_dice is None or val_dice > state.best_dice
    if cfg.decay_policy == "record":
        if improved:
            if state.best_dice is not None:
                state.lr *= cfg.decay_factor
            state.best_dice = val_dice
    else:
        if improved:
            state.best_dice = val_dice
            state.stale_epochs = 0
        else:
            state.stale_epochs += 1
            if state.stale_epochs >= cfg.plateau_patience:
                state.lr *= cfg.decay_factor
                state.stale_epochs = 0
    return state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    lr: float

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_dice": self.val_dice, "lr": self.lr}


@dataclass
class TrainResult:
    history: list[EpochRecord]
    batches_per_epoch: int
    best_dice: float

    @property
    def final_dice(self) -> float:
        return self.history[-1].val_dice


def _to_batches(pairs, order, batch_size):
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        images = np.stack([pairs[i][0] for i in idx])
        masks = np.stack([pairs[i][1] for i in idx])
        yield (torch.from_numpy(images.astype(np.float32)),
               torch.from_numpy(masks.astype(np.float32))[:, None])


def evaluate_dice(model, pairs, threshold: float = 0.5) -> list[float]:
    """Per-slice Dice of thresholded sigmoid predictions against the masks."""
    was_training = model.training
    model.eval()
    scores = []
    try:
        with torch.no_grad():
            for image, mask in pairs:
                x = torch.from_numpy(np.ascontiguousarray(image[None], dtype=np.float32))
                pred = (torch.sigmoid(model(x))[0, 0] > threshold).numpy()
                scores.append(dice_score(pred, mask))
    finally:
        model.train(was_training)
    return scores


def train_loop(model, train_pairs, val_pairs, cfg: TrainConfig,
               on_epoch=None) -> TrainResult:
    """SGD training over shuffled mini-batches with per-epoch validation Dice.

    train_pairs/val_pairs are lists of (image [1,H,W], mask [H,W]) arrays.
    The recorded lr is the value after the epoch's schedule update; on_epoch,
    when given, is called with each EpochRecord as it is produced.
    """
    if len(train_pairs) == 0 or len(val_pairs) == 0:
        raise EmptyDataset("train and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    optimizer = SGD(model.parameters(), lr=cfg.initial_lr, momentum=cfg.momentum)
    state = TrainState(lr=cfg.initial_lr)
    batches_per_epoch = math.ceil(len(train_pairs) / cfg.batch_size)
    history: list[EpochRecord] = []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_pairs))
        losses = []
        for images, masks in _to_batches(train_pairs, order, cfg.batch_size):
            optimizer.lr = state.lr
            optimizer.zero_grad()
            loss = composite_loss(model(images), masks, cfg.lambda_bce, cfg.lambda_dice)
            if not math.isfinite(float(loss.detach())):
                raise NonFiniteGradient(f"loss became {float(loss.detach())} in epoch {epoch}")
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        val_dice = float(np.mean(evaluate_dice(model, val_pairs)))
        state.epoch = epoch
        state = lr_on_validation(state, val_dice, cfg)
        record = EpochRecord(epoch, float(np.mean(losses)), val_dice, state.lr)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(history, batches_per_epoch, best_dice=state.best_dice)
