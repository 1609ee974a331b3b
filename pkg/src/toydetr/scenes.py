"""Synthetic detection scenes.

A scene is a set of boxes with categories plus an ``F x F`` grid of
``d``-dimensional features. Each object stamps an axis-aligned Gaussian bump,
centered on the box center with per-axis spread proportional to the box size,
multiplied by a fixed random signature vector of its category. A cell holds
the bump's average over the cell's area, so objects smaller than a cell still
reveal their size through amplitude. Gaussian noise is added on top.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .geometry import pairwise_iou_giou


@dataclass(frozen=True)
class GenConfig:
    grid: int = 8
    feat_dim: int = 32
    num_categories: int = 3
    max_objects: int = 8
    min_size: float = 0.1
    max_size: float = 0.35
    aspect_jitter: float = 0.3
    spread: float = 0.35
    noise: float = 0.02
    max_mutual_iou: float = 0.9
    signature_seed: int = 1234


@dataclass
class Scene:
    id: str
    boxes: np.ndarray  # (m, 4) cxcywh
    categories: np.ndarray  # (m,)
    features: np.ndarray  # (F*F, d), row-major over (row=y, col=x)
    grid: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    @property
    def num_objects(self) -> int:
        return len(self.categories)


def category_signatures(cfg: GenConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.signature_seed)
    sig = rng.normal(size=(cfg.num_categories, cfg.feat_dim))
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


def cell_centers(grid: int) -> np.ndarray:
    """(F*F, 2) array of (x, y) cell centers, row-major over y then x."""
    c = (np.arange(grid) + 0.5) / grid
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def _sample_boxes(rng: np.random.Generator, count: int, cfg: GenConfig) -> np.ndarray | None:
    boxes = []
    for _ in range(count):
        for _attempt in range(100):
            s = rng.uniform(cfg.min_size, cfg.max_size)
            r = np.exp(rng.uniform(-cfg.aspect_jitter, cfg.aspect_jitter))
            w = float(np.clip(s * r, cfg.min_size * 0.7, 0.95))
            h = float(np.clip(s / r, cfg.min_size * 0.7, 0.95))
            cx = rng.uniform(w / 2, 1 - w / 2)
            cy = rng.uniform(h / 2, 1 - h / 2)
            cand = np.array([cx, cy, w, h])
            if boxes:
                ious, _ = pairwise_iou_giou(cand[None], np.array(boxes))
                if ious.max() > cfg.max_mutual_iou:
                    continue
            boxes.append(cand)
            break
        else:
            return None
    return np.array(boxes).reshape(-1, 4)


def _cell_average(center: float, sigma: float, grid: int) -> np.ndarray:
    """Mean of an unnormalized 1-d Gaussian over each of ``grid`` equal cells of [0, 1]."""
    edges = np.linspace(0.0, 1.0, grid + 1)
    cdf = np.array([math.erf((e - center) / (sigma * math.sqrt(2.0))) for e in edges])
    return (cdf[1:] - cdf[:-1]) * 0.5 * sigma * math.sqrt(2.0 * math.pi) * grid


def render_features(boxes: np.ndarray, cats: np.ndarray, cfg: GenConfig, rng: np.random.Generator | None = None,
                    signatures: np.ndarray | None = None) -> np.ndarray:
    sig = category_signatures(cfg) if signatures is None else signatures
    feats = np.zeros((cfg.grid * cfg.grid, cfg.feat_dim))
    for (cx, cy, w, h), c in zip(boxes, cats):
        bx = _cell_average(cx, cfg.spread * w, cfg.grid)
        by = _cell_average(cy, cfg.spread * h, cfg.grid)
        bump = np.outer(by, bx).ravel()
        feats += bump[:, None] * sig[c][None, :]
    if cfg.noise > 0:
        if rng is None:
            raise ContractError("noise > 0 needs a generator")
        feats += rng.normal(0.0, cfg.noise, size=feats.shape)
    return feats


def generate_scene(rng: np.random.Generator, cfg: GenConfig = GenConfig(), scene_id: str = "0",
                   split: str = "train", signatures: np.ndarray | None = None) -> Scene:
    """Sample one scene; if placement fails after 100 attempts, retry with fewer objects."""
    count = int(rng.integers(1, cfg.max_objects + 1))
    while True:
        boxes = _sample_boxes(rng, count, cfg)
        if boxes is not None:
            break
        count -= 1
    cats = rng.integers(0, cfg.num_categories, size=len(boxes))
    feats = render_features(boxes, cats, cfg, rng, signatures)
    return Scene(scene_id, boxes, cats.astype(np.int64), feats, cfg.grid, split)


def build_dataset(cfg: GenConfig, n_train: int, n_val: int, seed: int) -> tuple[list[Scene], list[Scene]]:
    rng = np.random.default_rng(seed)
    sig = category_signatures(cfg)
    train = [generate_scene(rng, cfg, f"train-{i}", "train", sig) for i in range(n_train)]
    val = [generate_scene(rng, cfg, f"val-{i}", "val", sig) for i in range(n_val)]
    return train, val


# -- JSON-lines cache -------------------------------------------------------------
#
# One scene per line with fields:
#   id          string
#   boxes       list of [cx, cy, w, h]
#   categories  list of ints
#   grid        grid side F
#   feature_dim d
#   features    base64 of little-endian float64, shape (F*F, d), row-major
#   split       "train" or "val"

def scene_to_json(scene: Scene) -> str:
    blob = base64.b64encode(np.ascontiguousarray(scene.features, dtype="<f8").tobytes()).decode("ascii")
    rec = {
        "id": scene.id,
        "boxes": [[float(x) for x in row] for row in scene.boxes],
        "categories": [int(c) for c in scene.categories],
        "grid": int(scene.grid),
        "feature_dim": int(scene.features.shape[1]),
        "features": blob,
        "split": scene.split,
    }
    return json.dumps(rec, separators=(",", ":"))


def scene_from_json(line: str) -> Scene:
    rec = json.loads(line)
    f, d = rec["grid"], rec["feature_dim"]
    feats = np.frombuffer(base64.b64decode(rec["features"]), dtype="<f8").reshape(f * f, d).astype(np.float64)
    boxes = np.array(rec["boxes"], dtype=np.float64).reshape(-1, 4)
    return Scene(rec["id"], boxes, np.array(rec["categories"], dtype=np.int64), feats, f, rec["split"])


def write_jsonl(path, scenes) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(scene_to_json(s) + "\n")


def read_jsonl(path) -> list[Scene]:
    with open(path) as fh:
        return [scene_from_json(line) for line in fh if line.strip()]
