"""COCO-style AP/AR, optimal LRP, and query-level ranking diagnostics.

Detections are matched greedily in descending score order, per scene and
category, to the highest-IoU unmatched ground truth whose IoU reaches the
threshold. AP integrates the monotone precision envelope at 101 recall points
and is averaged over categories (those with ground truths) and then over IoU
thresholds 0.50:0.05:0.95.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .geometry import pairwise_iou_giou

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
REPORT_FIELDS = ("ap", "ap50", "ap75", "ar1", "ar10", "ar100", "olrp", "olrp_loc", "olrp_fp", "olrp_fn")


@dataclass
class MetricReport:
    ap: float
    ap50: float
    ap75: float
    ar1: float
    ar10: float
    ar100: float
    olrp: float
    olrp_loc: float
    olrp_fp: float
    olrp_fn: float
    pr_curves: dict = field(default_factory=dict, repr=False)

    def row(self, percent: bool = True) -> dict[str, float]:
        scale = 100.0 if percent else 1.0
        return {k: getattr(self, k) * scale for k in REPORT_FIELDS}


# -- matching ---------------------------------------------------------------------

def match_detections(det_boxes, det_scores, gt_boxes, iou_thresh: float):
    """Greedy matching for one scene and one category.

    Returns ``(order, tp, ious, gt_matched)`` where ``order`` sorts detections
    by descending score (stable), ``tp`` and ``ious`` are aligned with
    ``order`` (IoU of the matched ground truth, 0 for false positives).
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-det_scores, kind="stable")
    tp = np.zeros(len(order), dtype=bool)
    ious = np.zeros(len(order))
    gt_matched = np.zeros(len(gt_boxes), dtype=bool)
    if len(order) == 0 or len(gt_boxes) == 0:
        return order, tp, ious, gt_matched
    iou_m, _ = pairwise_iou_giou(det_boxes[order], gt_boxes)
    for r in range(len(order)):
        cand = np.where(gt_matched, -1.0, iou_m[r])
        g = int(np.argmax(cand))
        if cand[g] >= iou_thresh:
            gt_matched[g] = True
            tp[r] = True
            ious[r] = cand[g]
    return order, tp, ious, gt_matched


def _group(dets, scenes):
    """Index detections and ground truths by (scene id, category)."""
    by_det = defaultdict(list)
    for d in dets:
        by_det[(d.scene_id, int(d.category))].append(d)
    gts = {}
    for s in scenes:
        for c in np.unique(s.categories):
            gts[(s.id, int(c))] = s.boxes[s.categories == c]
    return by_det, gts


def _category_pool(by_det, gts, scene_ids, cat, thresh, max_dets=None):
    """Concatenate per-scene matches for one category: scores, tp flags, ious, n_gt."""
    scores, tps, ious = [], [], []
    n_gt = 0
    for sid in scene_ids:
        g = gts.get((sid, cat), np.zeros((0, 4)))
        n_gt += len(g)
        ds = by_det.get((sid, cat), [])
        if not ds:
            continue
        sc = np.array([d.score for d in ds])
        bx = np.array([d.box for d in ds])
        order, tp, iu, _ = match_detections(bx, sc, g, thresh)
        if max_dets is not None:
            order, tp, iu = order[:max_dets], tp[:max_dets], iu[:max_dets]
        scores.append(sc[order])
        tps.append(tp)
        ious.append(iu)
    if scores:
        return np.concatenate(scores), np.concatenate(tps), np.concatenate(ious), n_gt
    return np.zeros(0), np.zeros(0, dtype=bool), np.zeros(0), n_gt


# -- AP -------------------------------------------------------------------------------

def precision_recall(scores, tp, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(tp, dtype=bool)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt if n_gt else np.zeros(len(tp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def interpolated_precision(recall, precision) -> np.ndarray:
    """Envelope precision sampled at the 101 recall points."""
    if len(precision) == 0:
        return np.zeros(len(RECALL_POINTS))
    env = np.maximum.accumulate(np.asarray(precision)[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    out = np.zeros(len(RECALL_POINTS))
    ok = idx < len(env)
    out[ok] = env[idx[ok]]
    return out


def average_precision(tp_flags, n_gt: int, scores=None) -> float | None:
    """101-point interpolated AP from flags in score order; ``None`` when ``n_gt == 0``."""
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if n_gt == 0:
        return None
    if scores is None:
        scores = -np.arange(len(tp_flags), dtype=np.float64)
    recall, precision = precision_recall(scores, tp_flags, n_gt)
    return float(interpolated_precision(recall, precision).mean())


# -- oLRP -----------------------------------------------------------------------------

@dataclass
class LRPResult:
    olrp: float
    loc: float
    fp: float
    fn: float
    threshold: float


def lrp_at(tp, ious, n_gt: int, tau: float) -> float:
    tp = np.asarray(tp, dtype=bool)
    n_tp = int(tp.sum())
    n_fp = len(tp) - n_tp
    n_fn = n_gt - n_tp
    loc = float(((1.0 - np.asarray(ious)[tp]) / (1.0 - tau)).sum())
    return (loc + n_fp + n_fn) / (n_tp + n_fp + n_fn)


def optimal_lrp(scores, tp, ious, n_gt: int, tau: float = 0.5) -> LRPResult | None:
    """Minimum LRP over every score threshold (including keeping nothing)."""
    if n_gt == 0:
        return None
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.asarray(tp, dtype=bool)[order]
    loc_terms = np.where(tp, (1.0 - np.asarray(ious)[order]) / (1.0 - tau), 0.0)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    cloc = np.cumsum(loc_terms)
    # a threshold keeps a whole block of tied scores, so only block ends count
    ends = np.nonzero(np.append(s[1:] != s[:-1], True))[0] if len(s) else np.zeros(0, dtype=int)
    best = LRPResult(1.0, float("nan"), float("nan"), 1.0, float("inf"))
    for e in ends:
        n_tp, n_fp = int(ctp[e]), int(cfp[e])
        n_fn = n_gt - n_tp
        lrp = (cloc[e] + n_fp + n_fn) / (n_tp + n_fp + n_fn)
        if lrp < best.olrp:
            loc = cloc[e] / n_tp if n_tp else float("nan")
            best = LRPResult(float(lrp), float(loc), n_fp / max(n_tp + n_fp, 1), n_fn / n_gt, float(s[e]))
    return best


def olrp(dets, scenes, tau: float = 0.5) -> tuple[float, float, float, float] | None:
    """Category-averaged (oLRP, Loc, FP, FN); ``None`` when there are no ground truths."""
    by_det, gts = _group(dets, scenes)
    ids = [s.id for s in scenes]
    cats = sorted({c for (_, c) in gts})
    results = []
    for c in cats:
        sc, tp, iu, n_gt = _category_pool(by_det, gts, ids, c, tau)
        r = optimal_lrp(sc, tp, iu, n_gt, tau)
        if r is not None:
            results.append(r)
    if not results:
        return None
    return (
        float(np.mean([r.olrp for r in results])),
        float(np.nanmean([r.loc for r in results])) if any(np.isfinite(r.loc) for r in results) else float("nan"),
        float(np.nanmean([r.fp for r in results])) if any(np.isfinite(r.fp) for r in results) else float("nan"),
        float(np.mean([r.fn for r in results])),
    )


# -- full report --------------------------------------------------------------------

def evaluate(dets, scenes, num_categories: int | None = None, max_dets: int = 100, tau: float = 0.5) -> MetricReport:
    by_det, gts = _group(dets, scenes)
    ids = [s.id for s in scenes]
    if num_categories is None:
        cats = sorted({c for (_, c) in gts} | {c for (_, c) in by_det})
    else:
        cats = list(range(num_categories))

    ap_table = np.full((len(IOU_THRESHOLDS), len(cats)), np.nan)
    ar_table = {k: np.full((len(IOU_THRESHOLDS), len(cats)), np.nan) for k in (1, 10, 100)}
    curves = {}
    for ti, t in enumerate(IOU_THRESHOLDS):
        interp = []
        for ci, c in enumerate(cats):
            sc, tp, _, n_gt = _category_pool(by_det, gts, ids, c, t, max_dets)
            if n_gt == 0:
                continue
            rec, prec = precision_recall(sc, tp, n_gt)
            ip = interpolated_precision(rec, prec)
            interp.append(ip)
            ap_table[ti, ci] = ip.mean()
            for k in (1, 10, 100):
                _, tpk, _, _ = _category_pool(by_det, gts, ids, c, t, k)
                ar_table[k][ti, ci] = tpk.sum() / n_gt
        curves[float(t)] = np.mean(interp, axis=0) if interp else np.zeros(len(RECALL_POINTS))

    def mean_or_zero(a):
        return float(np.nanmean(a)) if np.isfinite(a).any() else 0.0

    lrp = olrp(dets, scenes, tau)
    if lrp is None:
        lrp = (float("nan"),) * 4
    return MetricReport(
        ap=mean_or_zero(ap_table),
        ap50=mean_or_zero(ap_table[0]),
        ap75=mean_or_zero(ap_table[5]),
        ar1=mean_or_zero(ar_table[1]),
        ar10=mean_or_zero(ar_table[10]),
        ar100=mean_or_zero(ar_table[100]),
        olrp=lrp[0],
        olrp_loc=lrp[1],
        olrp_fp=lrp[2],
        olrp_fn=lrp[3],
        pr_curves=curves,
    )


# -- diagnostics ----------------------------------------------------------------------

def empirical_cdf(values) -> tuple[np.ndarray, np.ndarray]:
    """Distinct sorted values and the fraction of samples at or below each."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        return v, v
    uniq, counts = np.unique(v, return_counts=True)
    return uniq, np.cumsum(counts) / len(v)


def _matched_flags(state, scene, matcher_kind, cfg):
    from .matching import match

    a = match(state, scene, matcher_kind, cfg.weights, cfg.alpha, cfg.high_order_base)
    flags = np.zeros(state.n, dtype=bool)
    flags[a.query_indices] = True
    return flags


def query_statistics(model, scenes, matcher_kind: str | None = None):
    """Per-layer matched/unmatched max-category scores and unmatched max-IoUs.

    Queries are labelled by the matcher the model finished training with
    unless ``matcher_kind`` is given.
    """
    from .detector import final_matcher

    kind = matcher_kind or final_matcher(model.cfg)
    scores = defaultdict(list)
    unmatched_iou = defaultdict(list)
    for scene in scenes:
        for st in model.forward(scene):
            flags = _matched_flags(st, scene, kind, model.cfg)
            best = st.probs.data.max(axis=1)
            scores[(st.layer_index, "matched")].extend(best[flags].tolist())
            scores[(st.layer_index, "unmatched")].extend(best[~flags].tolist())
            if scene.num_objects:
                iou_m, _ = pairwise_iou_giou(st.boxes.data, scene.boxes)
                mx = iou_m.max(axis=1)
            else:
                mx = np.zeros(st.n)
            unmatched_iou[st.layer_index].extend(mx[~flags].tolist())
    return scores, unmatched_iou


def score_distributions(model, scenes, matcher_kind: str | None = None) -> str:
    """CSV ``layer,group,value,cdf`` of max-category scores split by matched flag."""
    scores, _ = query_statistics(model, scenes, matcher_kind)
    return cdf_csv({k: v for k, v in scores.items()})


def unmatched_iou_cdf(model, scenes, matcher_kind: str | None = None) -> str:
    """CSV ``layer,group,value,cdf`` of each unmatched query's best IoU with any ground truth."""
    _, ious = query_statistics(model, scenes, matcher_kind)
    return cdf_csv({(layer, "unmatched"): v for layer, v in ious.items()})


def cdf_csv(groups: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "group", "value", "cdf"])
    for (layer, group) in sorted(groups):
        vals, cdf = empirical_cdf(groups[(layer, group)])
        for v, c in zip(vals, cdf):
            w.writerow([layer, group, f"{v:.6f}", f"{c:.6f}"])
    return buf.getvalue()


def pr_curves_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iou_threshold", "recall", "precision"])
    for t in sorted(report.pr_curves):
        for r, p in zip(RECALL_POINTS, report.pr_curves[t]):
            w.writerow([f"{t:.2f}", f"{r:.2f}", f"{p:.6f}"])
    return buf.getvalue()


def report_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    row = report.row()
    w.writerow([f"{row[k]:.4f}" for k in REPORT_FIELDS])
    return buf.getvalue()


__all__ = [
    "IOU_THRESHOLDS",
    "MetricReport",
    "match_detections",
    "average_precision",
    "precision_recall",
    "interpolated_precision",
    "optimal_lrp",
    "lrp_at",
    "olrp",
    "evaluate",
    "empirical_cdf",
    "query_statistics",
    "score_distributions",
    "unmatched_iou_cdf",
    "cdf_csv",
    "pr_curves_csv",
    "report_csv",
]
