"""Detection training objective: focal classification, smooth-L1 regression, total.

Anchor labels use the integer convention shared with the detector module:
``>= 0`` positive (value is the matched ground-truth index), ``-1`` negative,
``-2`` ignored. Both losses are raw sums over the contributing anchors
normalized by the positive count (floored at one), which keeps the loss scale
independent of the anchor grid size.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["LossConfig", "focal_loss", "smooth_l1", "total_loss", "LABEL_NEGATIVE", "LABEL_IGNORE"]

LABEL_NEGATIVE = -1
LABEL_IGNORE = -2

SCORE_FLOOR = 1e-12
SCORE_CEIL = 1.0 - 1e-12


@dataclasses.dataclass
class LossConfig:
    """Focal focusing parameters and per-term weights of the total objective."""

    alpha: float = 0.25
    gamma: float = 2.0
    weight_illum: float = 1.0
    weight_cls1: float = 1.0
    weight_cls2: float = 1.0
    weight_reg1: float = 1.0
    weight_reg2: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def focal_loss(scores: Tensor, labels: np.ndarray, cfg: LossConfig) -> Tensor:
    """Focal-weighted cross-entropy over positive and negative anchors.

    ``scores`` are post-sigmoid confidences (clamped into
    [1e-12, 1 - 1e-12]); positives contribute ``-alpha * (1-c)^gamma * log c``
    and negatives ``-(1-alpha) * c^gamma * log(1-c)``. Ignored anchors drop
    out. The sum is divided by max(1, #positives).
    """
    labels = np.asarray(labels)
    if labels.shape != scores.dims:
        raise T.ShapeError(f"focal_loss: labels shape {labels.shape} != scores dims {scores.dims}")
    pos = labels >= 0
    neg = labels == LABEL_NEGATIVE
    n_pos = int(pos.sum())
    norm = float(max(1, n_pos))
    alpha, gamma = cfg.alpha, cfg.gamma

    c = np.clip(scores.array, SCORE_FLOOR, SCORE_CEIL)
    one_m = 1.0 - c
    log_c = np.log(c)
    log_1m = np.log1p(-c)

    total = 0.0
    if n_pos:
        total -= alpha * (one_m[pos] ** gamma * log_c[pos]).sum()
    if neg.any():
        total -= (1.0 - alpha) * (c[neg] ** gamma * log_1m[neg]).sum()
    out = np.array([total / norm])

    def backward(g: np.ndarray) -> None:
        gs = np.zeros_like(c)
        if n_pos:
            if gamma == 0.0:
                gs[pos] = -alpha / c[pos]
            else:
                gs[pos] = -alpha * (
                    -gamma * one_m[pos] ** (gamma - 1.0) * log_c[pos] + one_m[pos] ** gamma / c[pos]
                )
        if neg.any():
            if gamma == 0.0:
                gs[neg] = (1.0 - alpha) / one_m[neg]
            else:
                gs[neg] = -(1.0 - alpha) * (
                    gamma * c[neg] ** (gamma - 1.0) * log_1m[neg] - c[neg] ** gamma / one_m[neg]
                )
        # clamped scores sit outside the differentiable interior
        interior = (scores.array > SCORE_FLOOR) & (scores.array < SCORE_CEIL)
        T.accumulate_grad(scores, g.reshape(-1)[0] * gs * interior / norm)

    return T.custom_op(out, (scores,), backward, "focal_loss")


def smooth_l1(pred: Tensor, target: np.ndarray, positive_mask: np.ndarray) -> Tensor:
    """Huber-style regression loss over the coordinates of positive anchors.

    Per element: ``0.5 x^2`` for |x| < 1 else ``|x| - 0.5`` with
    ``x = pred - target``. ``pred`` and ``target`` carry a trailing
    coordinate axis that ``positive_mask`` (shaped like the anchor axes)
    does not; only masked anchors contribute. The sum is divided by
    max(1, #positives).
    """
    target = np.asarray(target, dtype=np.float64)
    positive_mask = np.asarray(positive_mask, dtype=bool)
    if target.shape != pred.dims:
        raise T.ShapeError(f"smooth_l1: target shape {target.shape} != pred dims {pred.dims}")
    if positive_mask.shape != pred.dims[:-1]:
        raise T.ShapeError(
            f"smooth_l1: mask shape {positive_mask.shape} != anchor dims {pred.dims[:-1]}"
        )
    mask = np.broadcast_to(positive_mask[..., None], pred.dims)
    norm = float(max(1, int(positive_mask.sum())))

    x = (pred.array - target) * mask
    ax = np.abs(x)
    small = ax < 1.0
    per_elem = np.where(small, 0.5 * x * x, ax - 0.5) * mask
    out = np.array([per_elem.sum() / norm])

    def backward(g: np.ndarray) -> None:
        dx = np.where(small, x, np.sign(x)) * mask
        T.accumulate_grad(pred, g.reshape(-1)[0] * dx / norm)

    return T.custom_op(out, (pred,), backward, "smooth_l1")


def total_loss(
    l_illum: Tensor | None,
    l_cls1: Tensor,
    l_cls2: Tensor,
    l_reg1: Tensor,
    l_reg2: Tensor,
    cfg: LossConfig,
) -> Tensor:
    """Weighted sum of the five objective terms.

    ``l_illum`` may be None for models without the illumination head. Any
    non-finite term raises :class:`NumericError` naming the term.
    """
    terms = [
        ("illumination", l_illum, cfg.weight_illum),
        ("cls_stage1", l_cls1, cfg.weight_cls1),
        ("cls_stage2", l_cls2, cfg.weight_cls2),
        ("reg_stage1", l_reg1, cfg.weight_reg1),
        ("reg_stage2", l_reg2, cfg.weight_reg2),
    ]
    acc: Tensor | None = None
    for name, term, weight in terms:
        if term is None:
            continue
        if not np.isfinite(term.item()):
            raise T.NumericError(f"total loss term '{name}' is not finite ({term.item()})")
        piece = T.scale(term, weight)
        acc = piece if acc is None else T.add(acc, piece)
    assert acc is not None
    return acc
