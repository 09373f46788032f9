"""Training losses and the Dice evaluation metric."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from voxinit import nn, ops
from voxinit.autodiff import Tensor
from voxinit.transform import PermutationRecord

DICE_EPS = 1e-5
LOG_EPS = 1e-12


@dataclass
class LossReport:
    L_cls: float
    L_rec: float
    L_total: float
    per_level_cls: list[float] = field(default_factory=list)


@dataclass
class DiceReport:
    per_class: list[float]
    mean: float


def order_prediction_loss(logits: list[Tensor], perm: PermutationRecord, heads=None) -> Tensor:
    """Summed per-slot cross-entropy over classifier levels.

    ``logits`` holds one [slots, B] (or [1, slots, B]) tensor per encoder
    level; slot ``f`` is labelled with ``perm.order[f]``. ``heads`` selects
    the 1-based levels that contribute (all by default).
    """
    target = np.asarray(perm.order)
    picked = range(1, len(logits) + 1) if heads is None else heads
    total = None
    for i in picked:
        t = logits[i - 1]
        if t.ndim == 3:
            if t.shape[0] != 1:
                raise ValueError("order_prediction_loss takes one volume at a time")
            t = ops.reshape(t, t.shape[1:])
        slots, B = t.shape
        if B != perm.B or slots != perm.B:
            raise ValueError(f"logits of shape {t.shape} do not match B={perm.B}")
        logp = nn.log_softmax(t, axis=-1)
        onehot = np.zeros((slots, B), dtype=t.dtype)
        onehot[np.arange(slots), target] = 1.0
        term = ops.neg(ops.sum(ops.mul(logp, onehot)))
        total = term if total is None else ops.add(total, term)
    return total


def per_level_order_loss(logits: list[Tensor], perm: PermutationRecord) -> list[float]:
    return [float(order_prediction_loss([t], perm).data) for t in logits]


def reconstruction_loss(target: Tensor | np.ndarray, recon: Tensor) -> Tensor:
    """Mean squared error over every voxel."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=recon.dtype))
    if target.shape != recon.shape:
        raise ValueError(f"reconstruction shapes differ: {target.shape} vs {recon.shape}")
    return ops.mean(ops.power(ops.sub(recon, target), 2))


def ssl_loss(l_cls: Tensor, l_rec: Tensor) -> Tensor:
    return ops.add(l_cls, l_rec)


def loss_report(l_cls, l_rec, per_level=()) -> LossReport:
    c, r = float(np.asarray(getattr(l_cls, "data", l_cls))), float(np.asarray(getattr(l_rec, "data", l_rec)))
    return LossReport(c, r, c + r, list(per_level))


def one_hot(labels: np.ndarray, J: int, dtype=np.float64) -> np.ndarray:
    """[H,W,D] ints -> [J,H,W,D] one-hot."""
    return (np.arange(J).reshape((J,) + (1,) * labels.ndim) == labels[None]).astype(dtype)


def dice_ce_loss(y: Tensor | np.ndarray, yhat: Tensor, denominator: str = "squared",
                 eps: float = DICE_EPS, log_eps: float = LOG_EPS, check: bool = True) -> Tensor:
    """Soft Dice plus cross-entropy on [J, ...] one-hot targets and probabilities.

    1 - (2/J) sum_j <Y_j, P_j> / (|Y_j|^2 + |P_j|^2 + eps) - (1/N) sum Y log max(P, log_eps);
    ``denominator="plain"`` uses unsquared sums.
    """
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=yhat.dtype))
    if y.shape != yhat.shape:
        raise ValueError(f"target {y.shape} and prediction {yhat.shape} differ")
    if check and not np.allclose(yhat.data.sum(axis=0), 1.0, atol=1e-4):
        raise ValueError("prediction is not normalized over the class axis")
    J = yhat.shape[0]
    N = yhat.size // J
    axes = tuple(range(1, yhat.ndim))
    inter = ops.sum(ops.mul(y, yhat), axis=axes)
    if denominator == "squared":
        denom = ops.add(ops.sum(ops.mul(y, y), axis=axes), ops.sum(ops.mul(yhat, yhat), axis=axes))
    elif denominator == "plain":
        denom = ops.add(ops.sum(y, axis=axes), ops.sum(yhat, axis=axes))
    else:
        raise ValueError(f"denominator must be 'squared' or 'plain', got {denominator!r}")
    frac = ops.div(inter, ops.add(denom, eps))
    dice = ops.sub(1.0, ops.mul(ops.sum(frac), 2.0 / J))
    ce = ops.mul(ops.sum(ops.mul(y, ops.log(ops.clamp_min(yhat, log_eps)))), -1.0 / N)
    return ops.add(dice, ce)


def dice_metric(pred: np.ndarray, truth: np.ndarray, J: int) -> DiceReport:
    """Percent Dice per foreground class 1..J-1 (both empty -> 100, one empty -> 0)."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    scores = []
    for j in range(1, J):
        p, g = pred == j, truth == j
        sp, sg = int(p.sum()), int(g.sum())
        if sp == 0 and sg == 0:
            scores.append(100.0)
        else:
            scores.append(100.0 * 2.0 * int(np.logical_and(p, g).sum()) / (sp + sg))
    return DiceReport(scores, float(np.mean(scores)))
