# Boxes, costs, and one-to-one matching on a hand-made scene.
# Run: python demos/matching_walkthrough.py

from types import SimpleNamespace

import numpy as np

from toydetr.geometry import BBox, giou, iou, pairwise_iou_giou
from toydetr.losses import focal_loss, giou_focal_loss, varifocal_loss
from toydetr.matching import high_order_cost, hungarian, linear_cost
from toydetr.scenes import Scene

np.set_printoptions(precision=3, suppress=True)

# two overlapping boxes, (cx, cy, w, h) in unit coordinates
a = BBox(0.40, 0.40, 0.30, 0.30)
b = BBox(0.50, 0.45, 0.30, 0.20)
print("iou ", iou(a, b))
print("giou", giou(a, b))   # never above iou

# far-apart boxes: iou is 0 but giou still says how far
c = BBox(0.85, 0.85, 0.10, 0.10)
print("disjoint iou/giou", iou(a, c), giou(a, c))

# pairwise versions work on (n, 4) arrays
preds = np.array([[0.40, 0.40, 0.30, 0.30],
                  [0.52, 0.46, 0.28, 0.22],
                  [0.80, 0.80, 0.12, 0.12],
                  [0.20, 0.70, 0.10, 0.10]])
gts = np.array([[0.50, 0.45, 0.30, 0.20],
                [0.85, 0.85, 0.10, 0.10]])
ious, gious = pairwise_iou_giou(gts, preds)
ious    # rows are ground truths, columns predictions

# hungarian solves rectangular problems (rows <= columns)
cost = np.array([[4.0, 1.0, 3.0],
                 [2.0, 0.0, 5.0]])
sol = hungarian(cost)
print("pairs", sol.pairs, "total", sol.total_cost)

# matching cost on a toy scene: 4 queries, 3 categories
probs = np.array([[0.7, 0.1, 0.1],
                  [0.2, 0.6, 0.1],
                  [0.1, 0.2, 0.8],
                  [0.3, 0.3, 0.3]])
scene = Scene("demo", gts, np.array([0, 2]), np.zeros((16, 4)), grid=4)
pred = SimpleNamespace(probs=probs, boxes=preds)   # anything with .probs and .boxes

lin = linear_cost(pred, scene)
ho = high_order_cost(pred, scene, alpha=4.0)
print("linear cost\n", lin)
print("high-order cost\n", ho)   # -p * iou**alpha, zero wherever boxes miss
print("linear match    ", hungarian(lin).pairs)
print("high-order match", hungarian(ho).pairs)

# classification losses on a few probabilities
p = np.array([0.1, 0.5, 0.9])
print("focal, positive     ", focal_loss(p, True).data)
print("focal, negative     ", focal_loss(p, False).data)
print("giou-focal, t = 0.6 ", giou_focal_loss(p, np.full(3, 0.6)).data)
print("varifocal, t = 0.6  ", varifocal_loss(p, np.full(3, 0.6)).data)

# with a perfect-quality target the GIoU-aware loss is the focal loss
np.abs(giou_focal_loss(p, np.ones(3)).data - focal_loss(p, True).data).max()
