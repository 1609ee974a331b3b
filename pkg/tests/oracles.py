"""Independent reference implementations for the metric tests."""

import numpy as np

from toydetr.detector import Detection
from toydetr.geometry import BBox, iou
from toydetr.scenes import Scene


def scene(sid, boxes, cats):
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    return Scene(sid, boxes, np.asarray(cats, dtype=np.int64), np.zeros((4, 1)), 2)


def det(sid, box, cat, score):
    return Detection(sid, np.asarray(box, dtype=float), cat, score)


def brute_ap(flags, n_gt):
    # independent construction: precision at each rank, envelope, 101-point sampling
    prec, rec = [], []
    tp = 0
    for i, f in enumerate(flags, start=1):
        tp += f
        prec.append(tp / i)
        rec.append(tp / n_gt)
    total = 0.0
    # exact comparison against the float recall grid, as the COCO tool does
    for r in np.linspace(0, 1, 101):
        total += max([p for p, q in zip(prec, rec) if q >= r] or [0.0])
    return total / 101


def random_instance(rng, n_scenes=3, K=2):
    scenes, dets = [], []
    for s in range(n_scenes):
        m = int(rng.integers(0, 4))
        gt = np.column_stack([rng.uniform(0.2, 0.8, (m, 2)), rng.uniform(0.1, 0.3, (m, 2))])
        cats = rng.integers(0, K, m)
        scenes.append(scene(f"s{s}", gt, cats))
        for j in range(int(rng.integers(0, 6))):
            if m and rng.random() < 0.7:
                g = int(rng.integers(m))
                box = gt[g] + rng.normal(0, 0.03, 4)
                box[2:] = np.abs(box[2:]) + 0.01
                cat = int(cats[g]) if rng.random() < 0.8 else int(rng.integers(K))
            else:
                box = np.r_[rng.uniform(0.1, 0.9, 2), rng.uniform(0.05, 0.3, 2)]
                cat = int(rng.integers(K))
            dets.append(det(f"s{s}", box, cat, round(float(rng.random()), 3)))
    return dets, scenes


def brute_olrp(dets, scenes, tau):
    """Sweep thresholds on a 1e-3 grid with an independent greedy matcher."""
    cats = sorted({int(c) for s in scenes for c in s.categories})
    per_cat = []
    for c in cats:
        n_gt = sum(int((s.categories == c).sum()) for s in scenes)
        best = None
        for t in np.arange(0, 1.0015, 0.001):
            n_tp = n_fp = 0
            loc = 0.0
            ious_kept = []
            for s in scenes:
                gts = [BBox(*b) for b, k in zip(s.boxes, s.categories) if k == c]
                kept = sorted([d for d in dets if d.scene_id == s.id and d.category == c and d.score >= t - 1e-9],
                              key=lambda d: -d.score)
                used = [False] * len(gts)
                for d in kept:
                    vals = [(-1.0 if used[i] else iou(BBox(*d.box), g)) for i, g in enumerate(gts)]
                    i = int(np.argmax(vals)) if vals else -1
                    if i >= 0 and vals[i] >= tau:
                        used[i] = True
                        n_tp += 1
                        loc += (1 - vals[i]) / (1 - tau)
                        ious_kept.append(vals[i])
                    else:
                        n_fp += 1
            n_fn = n_gt - n_tp
            lrp = (loc + n_fp + n_fn) / (n_tp + n_fp + n_fn)
            if best is None or lrp < best[0] - 1e-15:
                best = (lrp, n_fn / n_gt)
        per_cat.append(best)
    return float(np.mean([b[0] for b in per_cat])), float(np.mean([b[1] for b in per_cat]))
