"""Soft-F1 loss and the mini-batch training loop for UNetConv."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import autograd as ag
from . import posteval
from . import unetconv
from .errors import ConfigError, EmptyLabel, NonFiniteLoss, ShapeMismatch

EPS_LOSS = 1e-6
LOSS_KINDS = ("inverse", "plain")  # alpha/F + 1 - F, or 1 - F


def label_vector(indices, length: int) -> np.ndarray:
    p = np.zeros(length)
    p[np.asarray(indices, dtype=int)] = 1.0
    return p


def _f1_parts(p_hat, p, as_printed):
    inter = np.sum(p_hat * p, axis=-1)
    denom = np.sum(p_hat, axis=-1) + np.sum(p, axis=-1)
    if np.any(denom == 0):
        raise EmptyLabel("soft F1 is undefined when both the prediction and the label are all zero")
    factor = 1.0 if as_printed else 2.0
    return factor, inter, denom


def soft_f1(p_hat, p, as_printed: bool = False):
    """Differentiable F1 between probabilities ``p_hat`` and a binary label.

    ``2 * sum(p_hat * p) / (sum(p_hat) + sum(p))``.  With ``as_printed`` the
    leading 2 is dropped, which caps a perfect prediction at 0.5.  Works on
    the last axis, so a batch gives one value per row.

    Examples
    --------
    >>> soft_f1([0.0, 0.5, 0.0], [0, 1, 0])
    0.6666666666666666
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p_hat.shape != p.shape:
        raise ShapeMismatch(f"soft_f1: prediction {p_hat.shape} vs label {p.shape}")
    factor, inter, denom = _f1_parts(p_hat, p, as_printed)
    f = factor * inter / denom
    return float(f) if np.ndim(f) == 0 else f


def loss_value(f1, alpha: float = 0.1, kind: str = "inverse"):
    """Loss as a function of soft F1.

    ``inverse``: ``alpha / max(F, 1e-6) + 1 - F``; ``plain``: ``1 - F``.
    """
    f1 = np.asarray(f1, dtype=np.float64)
    if kind == "plain":
        out = 1.0 - f1
    elif kind == "inverse":
        if alpha <= 0:
            raise ConfigError("alpha must be positive")
        out = alpha / np.maximum(f1, EPS_LOSS) + 1.0 - f1
    else:
        raise ConfigError(f"unknown loss kind {kind!r}")
    return float(out) if out.ndim == 0 else out


def _dloss_df(f1, alpha, kind):
    if kind == "plain":
        return -np.ones_like(f1)
    return np.where(f1 > EPS_LOSS, -alpha / np.maximum(f1, EPS_LOSS) ** 2, 0.0) - 1.0


def batch_loss(out: ag.Tensor, labels: np.ndarray, alpha: float = 0.1, kind: str = "inverse",
               as_printed: bool = False) -> ag.Tensor:
    """Mean per-sample loss of a ``B x 1 x L`` prediction, as a graph node."""
    if out.data.ndim != 3 or out.shape[1] != 1 or out.shape[0::2] != labels.shape:
        raise ShapeMismatch(f"batch_loss: output {out.shape}, labels {labels.shape}")
    p_hat = out.data[:, 0, :]
    factor, inter, denom = _f1_parts(p_hat, labels, as_printed)
    f1 = factor * inter / denom
    per = loss_value(f1, alpha, kind)
    B = labels.shape[0]

    def grad_fn(g):
        # dF/dp_hat_j = factor * (p_j * denom - inter) / denom^2
        df = factor * (labels * denom[:, None] - inter[:, None]) / denom[:, None] ** 2
        scale = _dloss_df(f1, alpha, kind) * (g / B)
        return ((scale[:, None] * df)[:, None, :],)

    return ag.custom("soft_f1_loss", (out,), np.mean(per), grad_fn)


def lr_schedule(epoch: int, lr0: float = 0.5, halve_every: int = 10) -> float:
    """Learning rate halved every ``halve_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * 0.5 ** (epoch // halve_every)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    alpha: float = 0.1
    lr0: float = 0.5
    rho: float = 0.5
    eps: float = 1e-6
    halve_every: int = 10
    seed: int = 0
    eval_every: int = 1
    early_stop: Optional[int] = None
    val_fraction: float = 0.05
    loss: str = "inverse"
    soft_f1_as_printed: bool = False
    nms_delta: float = 0.5
    nms_radius: int = 10

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.halve_every < 1 or self.eval_every < 1:
            raise ConfigError("batch_size, halve_every and eval_every must be >= 1; epochs >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}")
        if self.early_stop is not None and self.early_stop < 1:
            raise ConfigError("early_stop patience must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    val_f1: Optional[float] = None


@dataclass
class TrainResult:
    model: unetconv.Model
    best_model: unetconv.Model
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None


def split_validation(samples, fraction: float, seed: int):
    """Deterministically hold out ``round(fraction * n)`` samples."""
    n = len(samples)
    n_val = int(round(fraction * n))
    if n_val == 0:
        return list(samples), []
    order = np.random.Generator(np.random.Philox(seed)).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def validation_f1(model, samples, tolerance: int = 2, nms_cfg=posteval.NmsConfig()) -> float:
    rep = posteval.evaluate(posteval.UnetMethod(model, nms_cfg), _Bag(samples), [tolerance])
    return rep.rows[0].mean_f1


class _Bag:
    def __init__(self, samples, split="val"):
        self.samples, self.split = samples, split


def format_history(history: List[EpochRecord]) -> str:
    lines = []
    for h in history:
        val = "NA" if h.val_f1 is None else f"{h.val_f1:.6f}"
        lines.append(f"{h.epoch}\t{h.lr:.10g}\t{h.mean_loss:.10g}\t{val}")
    return "\n".join(lines) + ("\n" if lines else "")


def train(model: unetconv.Model, samples, config: TrainConfig = TrainConfig(), history_path=None,
          progress: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Fit ``model`` in place with AdaDelta on the soft-F1 loss.

    A ``val_fraction`` slice of ``samples`` is held out and scored by F1 at
    tolerance 2 every ``eval_every`` epochs; the best-scoring weights are
    returned as ``best_model`` alongside the final ones.  The last partial
    batch of an epoch is trained on, not dropped.
    """
    L = model.config.length
    for s in samples:
        if s.L != L:
            raise ShapeMismatch(f"sample {s.id} has length {s.L}, model expects {L}")
        if not s.knee_indices:
            raise EmptyLabel(f"sample {s.id} has no knee label")
    train_set, val_set = split_validation(samples, config.val_fraction, config.seed)
    if not train_set:
        raise ConfigError("no training samples left after the validation split")
    X = unetconv.encode_samples(train_set)
    Y = np.stack([label_vector(s.knee_indices, L) for s in train_set])
    params = model.parameters()
    opt = ag.AdaDeltaState(rho=config.rho, eps=config.eps, lr=config.lr0)
    rng = np.random.Generator(np.random.Philox(config.seed + 1))
    nms_cfg = posteval.NmsConfig(config.nms_delta, config.nms_radius)

    result = TrainResult(model, model)
    best_f1, stale = -math.inf, 0
    for epoch in range(config.epochs):
        opt.lr = lr_schedule(epoch, config.lr0, config.halve_every)
        order = rng.permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            with ag.Graph() as g:
                out = unetconv.forward(model, X[idx], train=True)
                loss = batch_loss(out, Y[idx], config.alpha, config.loss, config.soft_f1_as_printed)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch + 1, b + 1, value)
            model.zero_grad()
            ag.backward(g, loss)
            ag.adadelta_step(params, [p.grad if p.grad is not None else np.zeros_like(p.data)
                                      for p in params], opt)
            losses.append(value)
        rec = EpochRecord(epoch + 1, opt.lr, float(np.mean(losses)))
        if val_set and (epoch + 1) % config.eval_every == 0:
            rec.val_f1 = validation_f1(model, val_set, 2, nms_cfg)
            if rec.val_f1 > best_f1:
                best_f1, stale = rec.val_f1, 0
                result.best_model = copy.deepcopy(model)
                result.best_epoch = epoch + 1
            else:
                stale += 1
        result.history.append(rec)
        if history_path is not None:
            Path(history_path).write_text(format_history(result.history))
        if progress is not None:
            progress(rec)
        if config.early_stop is not None and stale >= config.early_stop:
            break
    if result.best_epoch is None:
        result.best_model = model
    return result
