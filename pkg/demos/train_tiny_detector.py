# Train a small detector for half a minute and look at what it learned.
# Run: python demos/train_tiny_detector.py

import numpy as np

from toydetr.config import parse_config
from toydetr.detector import Detector, infer, train
from toydetr.experiments import dataset, final_layer_stats
from toydetr.geometry import pairwise_iou_giou
from toydetr.metrics import evaluate

cfg = parse_config("""
data.train = 200
data.val = 50
optim.steps = 1500
rank.enable_head = true
rank.enable_qrl = true
loss.enable_gcl = true
matcher.enable_hmc = true
""")
train_set, val_set = dataset(cfg)

s = train_set[0]
print(s.id, "objects:", len(s.boxes), "categories:", s.categories)
s.features.shape    # one feature vector per grid cell

model = Detector(cfg.model_for_seed(0))
model, log = train(model, train_set, model.cfg, progress_every=300)

losses = np.array([r.loss for r in log])
print("mean loss, first/last 100 steps:", losses[:100].mean(), losses[-100:].mean())

# final-layer outputs, rows in rank order
final = model.forward(val_set[0])[-1]
top = np.argsort(-final.probs.data.max(axis=1))[:3]
print("top queries (prob, box):")
for q in top:
    print(" ", final.probs.data[q].round(3), final.boxes.data[q].round(3))
ious, _ = pairwise_iou_giou(val_set[0].boxes, final.boxes.data)
print("best IoU per object:", ious.max(axis=1).round(3))

dets = [d for sc in val_set for d in infer(model, sc)]
report = evaluate(dets, val_set, cfg.model.categories)
print({k: round(v, 2) for k, v in report.row().items()})
print(final_layer_stats(model, val_set))
