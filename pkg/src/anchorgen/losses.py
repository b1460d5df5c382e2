"""Soft loss weighting and the per-patch anchor losses.

Positive weights couple predicted confidence with matched IoU through a
squashed product: norm_weight(x1, x2) = sigmoid(4.5*x1*x2 - 1.5) /
sigmoid(3), written so that norm_weight(1, 1) is exactly 1.0 and the
floor norm_weight(0, *) = sigmoid(-1.5)/sigmoid(3) (~0.1915) never lets a
matched anchor's gradient vanish. Negative weights pass the IoU through a
complement surrogate and subtract sigmoid(-1.5) so a perfect anchor gets
almost no negative pressure.

The weights scale losses only; matching costs never see them. Gradients
for the classification losses are taken w.r.t. the score logit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Box, giou_loss_and_grad, iou
from .matching import Assignment, GroundTruth
from .predictor import ScoredAnchor

SIGMOID_3 = 1.0 / (1.0 + math.exp(-3.0))
SIGMOID_NEG_1_5 = 1.0 / (1.0 + math.exp(1.5))

L1_COEFF = 5.0
GIOU_COEFF = 2.0
CLS_COEFF = 2.0
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
_EPS = 1e-7


def linear_complement(t):
    """Default negative-probability surrogate: p_neg(t) = 1 - t."""
    return 1.0 - t


@dataclass
class WeightConfig:
    """Exponents and surrogate for the soft positive/negative weights."""

    gamma1: float = 0.4  # confidence exponent
    gamma2: float = 0.6  # IoU exponent
    p_neg: Callable = field(default=linear_complement)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def norm_weight(x1, x2):
    """Squashed product in (0, 1]; exact 1.0 at (1, 1).

    Accepts scalars or arrays. Equals sigmoid((x1*x2 - 1/3) * 4.5) /
    sigmoid(3), evaluated as sigmoid(4.5*x1*x2 - 1.5) for endpoint
    exactness in floating point.
    """
    val = _sigmoid(4.5 * np.multiply(x1, x2) - 1.5) / SIGMOID_3
    return float(val) if np.ndim(val) == 0 else val


def pos_weight(score, iou_val, cfg: WeightConfig):
    """Positive loss weight from confidence and matched IoU."""
    return norm_weight(np.power(score, cfg.gamma1), np.power(iou_val, cfg.gamma2))


def neg_weight(score, iou_val, cfg: WeightConfig):
    """Negative pressure on a matched anchor; ~0 when it is already accurate."""
    t = cfg.p_neg(np.power(iou_val, cfg.gamma2))
    val = norm_weight(np.power(score, cfg.gamma1), t) - SIGMOID_NEG_1_5
    return float(val) if np.ndim(val) == 0 else val


def box_loss(pred: Box, gt: Box, w_pos: float) -> tuple[float, np.ndarray]:
    """Weighted box loss 5*w*L1 + 2*w*(1 - GIoU) and its pred gradient.

    L1 is the mean absolute difference over (cx, cy, w, h); the gradient
    is w.r.t. those four fields.
    """
    p = pred.to_array()
    g = gt.to_array()
    diff = p - g
    l1_val = float(np.abs(diff).mean())
    d_l1 = np.sign(diff) * 0.25
    giou_val, d_giou = giou_loss_and_grad(pred, gt)
    value = L1_COEFF * w_pos * l1_val + GIOU_COEFF * w_pos * giou_val
    grad = L1_COEFF * w_pos * d_l1 + GIOU_COEFF * w_pos * d_giou
    return value, grad


def cls_loss_positive(score, w_pos, w_neg):
    """Soft-label score loss for a matched anchor.

    Value: -2 * (w_pos*log(s) + w_neg*log(1 - s)). The returned gradient
    is w.r.t. the score logit: 2 * ((w_pos + w_neg)*s - w_pos).
    Accepts scalars or arrays.
    """
    s = np.asarray(score, dtype=np.float64)
    sc = np.clip(s, _EPS, 1.0 - _EPS)
    value = -CLS_COEFF * (np.multiply(w_pos, np.log(sc)) + np.multiply(w_neg, np.log1p(-sc)))
    grad = CLS_COEFF * ((np.asarray(w_pos) + np.asarray(w_neg)) * s - np.asarray(w_pos))
    if np.ndim(value) == 0:
        return float(value), float(grad)
    return value, grad


def cls_loss_negative(score):
    """Focal background loss 2*(1-alpha)*s^gamma*(-log(1-s)).

    With alpha = 0.25, gamma = 2. Gradient w.r.t. the score logit is
    positive for every s in (0, 1): unmatched anchors are only pushed
    down. Accepts scalars or arrays.
    """
    s = np.asarray(score, dtype=np.float64)
    sc = np.clip(s, _EPS, 1.0 - _EPS)
    scale = CLS_COEFF * (1.0 - FOCAL_ALPHA)
    value = scale * s * s * (-np.log1p(-sc))
    dv_ds = scale * (-2.0 * s * np.log1p(-sc) + s * s / (1.0 - sc))
    grad = dv_ds * s * (1.0 - s)
    if np.ndim(value) == 0:
        return float(value), float(grad)
    return value, grad


@dataclass
class LossBreakdown:
    """Per-patch loss components, already normalized by matched count.

    Components exclude their coefficients; ``total`` applies them:
    total = lambda_anchor * (5*l1 + 2*giou + 2*(cls_pos + cls_neg)).
    """

    l1: float
    giou: float
    cls_pos: float
    cls_neg: float
    total: float
    matched: int = 0

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            self.l1 + other.l1,
            self.giou + other.giou,
            self.cls_pos + other.cls_pos,
            self.cls_neg + other.cls_neg,
            self.total + other.total,
            self.matched + other.matched,
        )

    def scaled(self, f: float) -> "LossBreakdown":
        return LossBreakdown(
            self.l1 * f, self.giou * f, self.cls_pos * f, self.cls_neg * f, self.total * f, self.matched
        )


def anchor_loss(
    anchors: list[ScoredAnchor],
    targets: GroundTruth,
    assignment: Assignment,
    cfg: WeightConfig,
    lambda_anchor: float = 1.0,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Aggregate losses for one patch and the per-anchor gradients.

    Matched anchors get the weighted box loss plus the soft positive
    score loss (its w_pos argument is the matched IoU, w_neg from the
    surrogate); unmatched anchors get the focal background loss. Sums are
    normalized by the matched count (minimum 1). Weight inputs (score,
    IoU) are treated as constants: no gradient flows through them.

    Returns:
        (breakdown,
         grad_box (K, 4) w.r.t. mapped box fields,
         grad_logit (K,) w.r.t. score logits), float64 gradients already
        scaled by the coefficients, normalization, and ``lambda_anchor``.
    """
    k = len(anchors)
    grad_box = np.zeros((k, 4), dtype=np.float64)
    grad_logit = np.zeros(k, dtype=np.float64)
    n_matched = len(assignment.pairs)
    norm = max(1, n_matched)
    inv = 1.0 / norm
    l1_sum = 0.0
    giou_sum = 0.0
    cls_pos_sum = 0.0

    for ai, gi in assignment.pairs:
        anchor = anchors[ai]
        gt_box = targets.boxes[gi]
        iou_val = iou(anchor.box, gt_box)  # detached soft label
        wp_box = pos_weight(anchor.score, iou_val, cfg)
        wn = neg_weight(anchor.score, iou_val, cfg)

        p = anchor.box.to_array()
        diff = p - gt_box.to_array()
        l1_val = float(np.abs(diff).mean())
        giou_val, d_giou = giou_loss_and_grad(anchor.box, gt_box)
        l1_sum += wp_box * l1_val
        giou_sum += wp_box * giou_val
        grad_box[ai] = (L1_COEFF * wp_box * np.sign(diff) * 0.25 + GIOU_COEFF * wp_box * d_giou) * (
            lambda_anchor * inv
        )

        _, d_logit = cls_loss_positive(anchor.score, iou_val, wn)
        sc = min(max(anchor.score, _EPS), 1.0 - _EPS)
        cls_pos_sum += -(iou_val * math.log(sc) + wn * math.log1p(-sc))
        grad_logit[ai] = d_logit * lambda_anchor * inv

    matched_set = {ai for ai, _ in assignment.pairs}
    neg_idx = [i for i in range(k) if i not in matched_set]
    cls_neg_sum = 0.0
    if neg_idx:
        scores = np.array([anchors[i].score for i in neg_idx], dtype=np.float64)
        values, grads = cls_loss_negative(scores)
        cls_neg_sum = float(values.sum()) / CLS_COEFF
        grad_logit[neg_idx] = grads * lambda_anchor * inv

    breakdown = LossBreakdown(
        l1=l1_sum * inv,
        giou=giou_sum * inv,
        cls_pos=cls_pos_sum * inv,
        cls_neg=cls_neg_sum * inv,
        total=lambda_anchor
        * (L1_COEFF * l1_sum + GIOU_COEFF * giou_sum + CLS_COEFF * (cls_pos_sum + cls_neg_sum))
        * inv,
        matched=n_matched,
    )
    return breakdown, grad_box, grad_logit
