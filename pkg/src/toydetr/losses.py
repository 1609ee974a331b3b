"""Classification losses and the per-layer set-prediction training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Value, as_value
from .errors import ContractError, ValidationError
from .geometry import diff_iou_giou, diff_l1

PROB_EPS = 1e-12

LOSS_KINDS = ("focal", "giou_focal", "varifocal")
TARGET_KINDS = ("iou_pow", "norm_giou_pow")


@dataclass(frozen=True)
class LossWeights:
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0
    lambda_cls: float = 2.0
    gamma: float = 2.0

    def __post_init__(self):
        for name in ("lambda_giou", "lambda_l1", "lambda_cls", "gamma"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValidationError(f"{name} must be finite and nonnegative, got {val}")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(self.lambda_giou * k, self.lambda_l1 * k, self.lambda_cls * k, self.gamma)


def _clamped(p) -> Value:
    return as_value(p).clip(PROB_EPS, 1.0 - PROB_EPS)


def _check_target(t) -> np.ndarray:
    t = np.asarray(t.data if isinstance(t, Value) else t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t <= 0) or np.any(t > 1):
        raise ValidationError("classification target must lie in (0, 1]")
    return t


def focal_loss(p_hat, positive, gamma: float = 2.0) -> Value:
    """Elementwise binary focal loss on probabilities.

    ``positive`` may be a bool or a bool array broadcastable to ``p_hat``.
    """
    p = _clamped(p_hat)
    positive = np.broadcast_to(np.asarray(positive, dtype=bool), p.shape)
    pos = -((1.0 - p) ** gamma) * p.log()
    neg = -(p ** gamma) * (1.0 - p).log()
    mask = positive.astype(np.float64)
    return pos * mask + neg * (1.0 - mask)


def giou_focal_loss(p_hat, t, gamma: float = 2.0) -> Value:
    """Focal loss with a soft positive target ``t`` in (0, 1].

    ``-|t - p|^gamma * (t log p + (1 - t) log(1 - p))``; the target is a
    constant and receives no gradient.
    """
    t = _check_target(t)
    p = _clamped(p_hat)
    modulator = (p - t).abs() ** gamma
    bce = p.log() * t + (1.0 - p).log() * (1.0 - t)
    return -(modulator * bce)


def varifocal_loss(p_hat, t) -> Value:
    """Positive-sample varifocal loss: BCE against ``t`` scaled by ``t``."""
    t = _check_target(t)
    p = _clamped(p_hat)
    bce = p.log() * t + (1.0 - p).log() * (1.0 - t)
    return -(bce * t)


def target_transform(kind: str, giou_or_iou, power: float = 1.0):
    """Map an overlap score to a classification target.

    ``iou_pow`` returns ``iou ** power``; ``norm_giou_pow`` returns
    ``((giou + 1) / 2) ** power``.
    """
    if not power > 0:
        raise ValidationError(f"target power must be positive, got {power}")
    x = np.asarray(giou_or_iou, dtype=np.float64)
    if kind == "iou_pow":
        out = np.power(x, power)
    elif kind == "norm_giou_pow":
        out = np.power((x + 1.0) / 2.0, power)
    else:
        raise ValidationError(f"unknown target kind {kind!r}; expected one of {TARGET_KINDS}")
    return float(out) if out.ndim == 0 else out


def _pairs(assignment) -> list[tuple[int, int]]:
    pairs = assignment.pairs if hasattr(assignment, "pairs") else assignment
    return [(int(g), int(q)) for g, q in pairs]


def _targets_from(iou, giou, kind: str, power: float) -> np.ndarray:
    base = giou if kind == "norm_giou_pow" else iou
    t = np.asarray(target_transform(kind, base, power), dtype=np.float64)
    # keep t strictly positive so fully disjoint pairs stay legal targets
    return np.clip(t, PROB_EPS, 1.0)


def quality_targets(pred_boxes, gt, assignment, kind: str = "norm_giou_pow", power: float = 1.0) -> np.ndarray:
    """Detached classification targets of the matched pairs, in assignment order."""
    pairs = _pairs(assignment)
    if not pairs:
        return np.zeros(0)
    b = np.asarray(getattr(pred_boxes, "data", pred_boxes), dtype=np.float64)
    gt_boxes = np.asarray(gt.boxes, dtype=np.float64).reshape(-1, 4)
    q = np.array([q for _, q in pairs])
    g = np.array([g for g, _ in pairs])
    iou, giou = diff_iou_giou(b[q], gt_boxes[g])
    return _targets_from(iou.data, giou.data, kind, power)


def composite_loss(
    pred,
    gt,
    assignment,
    w: LossWeights = LossWeights(),
    cls_kind: str = "focal",
    target_kind: str = "norm_giou_pow",
    target_power: float = 1.0,
    targets=None,
) -> Value:
    """Set-prediction loss for one decoder layer.

    ``pred`` carries ``probs`` (n, K) and ``boxes`` (n, 4) values; ``gt`` carries
    ``boxes`` (m, 4) and ``categories`` (m,). Matched pairs contribute
    ``lambda_giou * (1 - GIoU) + lambda_l1 * L1 + lambda_cls * cls_pos``; every
    other (query, category) entry contributes ``lambda_cls * focal_neg``.
    ``targets`` overrides the detached quality targets of the matched pairs
    (see :func:`quality_targets`).
    """
    if cls_kind not in LOSS_KINDS:
        raise ValidationError(f"unknown classification loss {cls_kind!r}; expected one of {LOSS_KINDS}")
    probs = as_value(pred.probs)
    boxes = as_value(pred.boxes)
    n, K = probs.shape
    gt_boxes = np.asarray(gt.boxes, dtype=np.float64).reshape(-1, 4)
    gt_cats = np.asarray(gt.categories, dtype=np.int64).reshape(-1)
    pairs = _pairs(assignment)
    m = len(gt_boxes)

    qs = [q for _, q in pairs]
    gs = [g for g, _ in pairs]
    if any(not 0 <= q < n for q in qs) or any(not 0 <= g < m for g in gs):
        raise ContractError(f"assignment {pairs} out of range for {m} ground truths and {n} queries")
    if len(set(qs)) != len(qs) or len(set(gs)) != len(gs):
        raise ContractError("assignment must be one-to-one")

    pos_mask = np.zeros((n, K), dtype=bool)
    total = Value(0.0)
    if pairs:
        q_idx = np.array(qs)
        g_idx = np.array(gs)
        c_idx = gt_cats[g_idx]
        pos_mask[q_idx, c_idx] = True

        matched = boxes[q_idx]
        target_boxes = gt_boxes[g_idx]
        iou_v, giou_v = diff_iou_giou(matched, target_boxes)
        box_term = (1.0 - giou_v).sum() * w.lambda_giou + diff_l1(matched, target_boxes).sum() * w.lambda_l1

        p_pos = probs[q_idx, c_idx]
        if cls_kind == "focal":
            cls_pos = focal_loss(p_pos, True, w.gamma)
        else:
            if targets is None:
                t = _targets_from(iou_v.data, giou_v.data, target_kind, target_power)
            else:
                t = np.asarray(targets, dtype=np.float64).reshape(-1)
            if cls_kind == "giou_focal":
                cls_pos = giou_focal_loss(p_pos, t, w.gamma)
            else:
                cls_pos = varifocal_loss(p_pos, t)
        total = box_term + cls_pos.sum() * w.lambda_cls

    neg = focal_loss(probs, False, w.gamma) * (~pos_mask).astype(np.float64)
    return total + neg.sum() * w.lambda_cls
