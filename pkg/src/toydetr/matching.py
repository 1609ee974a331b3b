"""Exact one-to-one assignment between ground truths and queries.

Cost matrices are ``(m, n)`` with ground truths as rows and queries as
columns, ``m <= n``. Two cost builders are provided: the weighted linear cost
(negative GIoU + L1 + focal classification cost) and the high-order cost
``-p[c] * overlap ** alpha``, which is a score to maximize stored negated so
that :func:`hungarian` always minimizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ValidationError
from .geometry import pairwise_iou_giou, pairwise_l1
from .losses import PROB_EPS, LossWeights

LINEAR = "linear"
HIGH_ORDER = "high_order"
HIGH_ORDER_BASES = ("iou", "norm_giou")


@dataclass
class Assignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0

    def query_for(self) -> dict[int, int]:
        return dict(self.pairs)

    @property
    def query_indices(self) -> list[int]:
        return [q for _, q in self.pairs]


@dataclass(frozen=True)
class MatcherSchedule:
    switch_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.switch_fraction <= 1.0:
            raise ValidationError(f"switch_fraction must lie in [0, 1], got {self.switch_fraction}")


def _solve(cost: list[list[float]], n_rows: int, n_cols: int):
    """Shortest-augmenting-path Hungarian method, rows <= cols.

    Returns (row_to_col, u, v) with 1-based potentials; reduced costs
    ``c[i][j] - u[i+1] - v[j+1]`` are nonnegative and zero on the assignment,
    and ``v`` is zero on every unassigned column.
    """
    inf = math.inf
    u = [0.0] * (n_rows + 1)
    v = [0.0] * (n_cols + 1)
    p = [0] * (n_cols + 1)
    way = [0] * (n_cols + 1)
    for i in range(1, n_rows + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n_cols + 1)
        used = [False] * (n_cols + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = cost[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n_cols + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n_cols + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = [0] * n_rows
    for j in range(1, n_cols + 1):
        if p[j]:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col, u, v


def _seq_total(cost: list[list[float]], cols: list[int]) -> float:
    total = 0.0
    for i, j in enumerate(cols):
        total += cost[i][j]
    return total


def _sub_optimum(cost: list[list[float]], rows: range, cols: list[int]) -> float:
    if not len(rows):
        return 0.0
    sub = [[cost[i][j] for j in cols] for i in rows]
    r2c, _, _ = _solve(sub, len(rows), len(cols))
    return _seq_total(sub, r2c)


def hungarian(c) -> Assignment:
    """Minimum-cost assignment of every row to a distinct column.

    Among optimal assignments the one whose column list (in row order) is
    lexicographically smallest is returned, so results are reproducible.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise ContractError(f"cost matrix must be 2-d, got shape {c.shape}")
    m, n = c.shape
    if m > n:
        raise ContractError(f"more ground truths ({m}) than queries ({n})")
    if np.isnan(c).any():
        raise ValidationError("cost matrix contains NaN")
    if not np.isfinite(c).all():
        raise ValidationError("cost matrix contains infinite entries")
    if m == 0:
        return Assignment([], 0.0)

    cost = c.tolist()
    r2c, u, v = _solve(cost, m, n)
    best = _seq_total(cost, r2c)
    # ties only up to summation rounding, so tiny but genuine preferences survive
    tol = 16 * (m + 1) * np.finfo(np.float64).eps * float(np.abs(c).max())

    chosen: list[int] = []
    used: set[int] = set()
    remaining = best - 0.0
    ok = True
    for i in range(m):
        cands = [j for j in range(n) if j not in used and cost[i][j] - u[i + 1] - v[j + 1] <= tol]
        pick = None
        if len(cands) == 1:
            pick = cands[0]
        else:
            for j in cands:
                rest_cols = [k for k in range(n) if k not in used and k != j]
                sub = _sub_optimum(cost, range(i + 1, m), rest_cols)
                if cost[i][j] + sub <= remaining + tol:
                    pick = j
                    break
        if pick is None:
            ok = False
            break
        chosen.append(pick)
        used.add(pick)
        remaining -= cost[i][pick]

    cols = chosen if ok else r2c
    return Assignment([(i, j) for i, j in enumerate(cols)], _seq_total(cost, cols))


# -- cost builders -------------------------------------------------------------

def _pred_arrays(pred) -> tuple[np.ndarray, np.ndarray]:
    probs = getattr(pred.probs, "data", pred.probs)
    boxes = getattr(pred.boxes, "data", pred.boxes)
    return np.asarray(probs, dtype=np.float64), np.asarray(boxes, dtype=np.float64)


def _gt_arrays(gt) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.asarray(gt.boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(gt.categories, dtype=np.int64).reshape(-1),
    )


def linear_cost(pred, gt, w: LossWeights = LossWeights()) -> np.ndarray:
    """``-l1*GIoU + l2*L1 + l3*FL(p[c])`` for every (ground truth, query) pair."""
    probs, boxes = _pred_arrays(pred)
    gt_boxes, gt_cats = _gt_arrays(gt)
    _, giou_m = pairwise_iou_giou(gt_boxes, boxes)
    l1_m = pairwise_l1(gt_boxes, boxes)
    p = np.clip(probs[:, gt_cats].T, PROB_EPS, 1.0 - PROB_EPS)
    cls_cost = -((1.0 - p) ** w.gamma) * np.log(p)
    return -w.lambda_giou * giou_m + w.lambda_l1 * l1_m + w.lambda_cls * cls_cost


def high_order_cost(pred, gt, alpha: float = 4.0, base: str = "iou") -> np.ndarray:
    """Negated ``p[c] * overlap ** alpha``; ``base`` picks IoU or (GIoU + 1) / 2."""
    if not alpha > 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    if base not in HIGH_ORDER_BASES:
        raise ValidationError(f"unknown high-order base {base!r}; expected one of {HIGH_ORDER_BASES}")
    probs, boxes = _pred_arrays(pred)
    gt_boxes, gt_cats = _gt_arrays(gt)
    iou_m, giou_m = pairwise_iou_giou(gt_boxes, boxes)
    overlap = iou_m if base == "iou" else (giou_m + 1.0) / 2.0
    score = probs[:, gt_cats].T * overlap ** alpha
    return -score


def select_matcher(step: int, total_steps: int, schedule: MatcherSchedule = MatcherSchedule()) -> str:
    """Linear cost before ``switch_fraction * total_steps``, high-order from then on.

    A switch fraction of exactly 1 disables the high-order cost.
    """
    if schedule.switch_fraction >= 1.0:
        return LINEAR
    return HIGH_ORDER if step >= schedule.switch_fraction * total_steps else LINEAR


def match(pred, gt, kind: str, w: LossWeights = LossWeights(), alpha: float = 4.0, base: str = "iou") -> Assignment:
    """Build the requested cost on detached values and solve it."""
    gt_boxes, _ = _gt_arrays(gt)
    if len(gt_boxes) == 0:
        return Assignment([], 0.0)
    if kind == LINEAR:
        cost = linear_cost(pred, gt, w)
    elif kind == HIGH_ORDER:
        cost = high_order_cost(pred, gt, alpha, base)
    else:
        raise ValidationError(f"unknown matcher kind {kind!r}")
    return hungarian(cost)
