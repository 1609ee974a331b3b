"""Rank-oriented pieces of the decoder.

* a classification head that adds a learnable logit bias per *rank position*
  before the sigmoid;
* a query rank layer that, between decoder layers, sorts queries by their
  previous-layer confidence, fuses a rank-indexed learnable content embedding
  into the sorted content queries, and sorts (or regenerates from sorted boxes)
  the positional queries;
* sine positional encoding of boxes and top-k selection over flattened
  (query, category) scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Value, as_value, concat, gather_rows, where_mask
from .errors import ContractError, ValidationError
from .geometry import BBox
from .layers import ParamStore, linear, mlp2

SORT_POSITIONAL = "sort"
RECREATE_POSITIONAL = "recreate"
VARIANTS = (SORT_POSITIONAL, RECREATE_POSITIONAL)


@dataclass
class QueryState:
    """Everything one decoder layer produces, row-aligned by current rank order.

    ``order[i]`` is the original (layer-0) query that currently sits at row
    ``i``; ``ref`` holds the detached reference boxes the layer refined.
    """

    content: Value
    positional: Value
    logits: Value
    probs: Value
    boxes: Value
    layer_index: int
    ref: np.ndarray | None = None
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    def bboxes(self) -> list[BBox]:
        return [BBox(*row) for row in self.boxes.data.tolist()]


class RankParams:
    """Per-layer rank parameters registered in a :class:`ParamStore`.

    ``bias[l]`` is the (n, K) logit bias for layers 1..L; ``content[l]`` is the
    (n, d) rank content for layers 2..L and ``fuse.{l}`` the 2d -> d layer.
    """

    def __init__(self, store: ParamStore, rng: np.random.Generator, n: int, d: int, K: int, L: int,
                 content_std: float = 0.02, fuse_noise: float = 1e-3):
        self.store = store
        self.n, self.d, self.K, self.L = n, d, K, L
        for layer in range(1, L + 1):
            store.add(f"rank.bias.{layer}", np.zeros((n, K)))
        for layer in range(2, L + 1):
            store.add(f"rank.content.{layer}", rng.normal(0.0, content_std, size=(n, d)))
            w = np.vstack([np.eye(d), np.zeros((d, d))]) + rng.normal(0.0, fuse_noise, size=(2 * d, d))
            store.add(f"rank.fuse.{layer}.w", w)
            store.add(f"rank.fuse.{layer}.b", np.zeros(d))

    def bias(self, layer: int):
        return self.store[f"rank.bias.{layer}"]

    def content(self, layer: int):
        return self.store[f"rank.content.{layer}"]

    def set_pass_through(self) -> None:
        """Zero every rank parameter and make the fuse layers exact projections."""
        d = self.d
        for layer in range(1, self.L + 1):
            self.bias(layer).data[...] = 0.0
        for layer in range(2, self.L + 1):
            self.content(layer).data[...] = 0.0
            self.store[f"rank.fuse.{layer}.w"].data[...] = np.vstack([np.eye(d), np.zeros((d, d))])
            self.store[f"rank.fuse.{layer}.b"].data[...] = 0.0


def rank_adaptive_head(logits: Value, bias=None) -> Value:
    """``sigmoid(logits + bias)``; the bias row ``i`` belongs to rank position ``i``."""
    logits = as_value(logits)
    if bias is None:
        return logits.sigmoid()
    bias = as_value(bias)
    if bias.shape != logits.shape:
        raise ShapeError(f"logit bias shape {bias.shape} does not match logits {logits.shape}")
    return (logits + bias).sigmoid()


def ranking_basis(probs) -> tuple[np.ndarray, np.ndarray]:
    """Per-query confidence (max over categories) and its descending stable sort."""
    p = np.asarray(getattr(probs, "data", probs), dtype=np.float64)
    scores = p.max(axis=1)
    perm = np.argsort(-scores, kind="stable")
    return scores, perm


def rank_and_fuse(prev: QueryState, params: RankParams, layer: int, variant: str = SORT_POSITIONAL,
                  pe=None, perm=None, boxes=None) -> tuple[Value, Value, np.ndarray, np.ndarray, np.ndarray]:
    """Build the sorted, rank-fused inputs for decoder layer ``layer`` (>= 2).

    Returns ``(content, positional, ref_boxes, order, perm)``. ``pe`` maps an
    (n, 4) box array to positional queries and is required by the recreate
    variant. ``perm`` and ``boxes`` replace the ranking of ``prev.probs`` and
    the detached ``prev.boxes`` when given.
    """
    if layer < 2:
        raise ContractError("the query rank layer only precedes decoder layers 2..L")
    if variant not in VARIANTS:
        raise ValidationError(f"unknown positional variant {variant!r}; expected one of {VARIANTS}")
    if perm is None:
        _, perm = ranking_basis(prev.probs)
    sorted_content = gather_rows(prev.content, perm)
    content = linear(concat(sorted_content, params.content(layer)), params.store, f"rank.fuse.{layer}")
    sorted_boxes = (prev.boxes.data if boxes is None else np.asarray(boxes))[perm]
    if variant == SORT_POSITIONAL:
        positional = gather_rows(prev.positional, perm)
    else:
        if pe is None:
            raise ContractError("recreate variant needs a positional encoder")
        positional = pe(sorted_boxes)
    order = prev.order[perm] if len(prev.order) else perm.copy()
    return content, positional, sorted_boxes, order, perm


# -- sine positional encoding ---------------------------------------------------

def _frequencies(per_coord: int, temperature: float, cycles: float) -> np.ndarray:
    i = np.arange(per_coord)
    return 2.0 * math.pi * cycles / temperature ** (2 * (i // 2) / per_coord)


def sine_encoding(boxes, width: int, temperature: float = 10000.0, cycles: float = 1.0) -> Value:
    """Raw (n, width) encoding: per coordinate, interleaved sin/cos pairs.

    Coordinates are taken in (cx, cy, w, h) order; each gets ``width / 4``
    features whose pairs share a frequency, spaced geometrically from
    ``cycles`` periods per unit length downwards.
    """
    if width <= 0 or width % 8:
        raise ValidationError(f"encoding width must be a positive multiple of 8, got {width}")
    if isinstance(boxes, BBox):
        boxes = boxes.as_array()[None, :]
    elif isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], BBox):
        boxes = np.stack([b.as_array() for b in boxes])
    b = as_value(boxes)
    if b.ndim == 1:
        b = b.reshape(1, -1)
    per = width // 4
    freq = _frequencies(per, temperature, cycles)
    proj = np.zeros((4, width))
    for c in range(4):
        proj[c, c * per:(c + 1) * per] = freq
    phase = b @ Value(proj)
    even = np.zeros(width, dtype=bool)
    even[0::2] = True
    mask = np.broadcast_to(even, phase.shape)
    return where_mask(mask, phase.sin(), phase.cos())


def sine_pe(boxes, store: ParamStore, name: str, width: int, temperature: float = 10000.0,
            cycles: float = 1.0) -> Value:
    """Sine encoding followed by the two-layer perceptron ``name``."""
    return mlp2(sine_encoding(boxes, width, temperature, cycles), store, name)


def add_sine_pe(store: ParamStore, rng: np.random.Generator, name: str, width: int, d: int) -> None:
    if width <= 0 or width % 8:
        raise ValidationError(f"encoding width must be a positive multiple of 8, got {width}")
    store.linear(rng, f"{name}.0", width, d)
    store.linear(rng, f"{name}.1", d, d)


# -- top-k --------------------------------------------------------------------------

@dataclass
class Ranked:
    query: np.ndarray
    category: np.ndarray
    score: np.ndarray
    boxes: np.ndarray

    def __len__(self) -> int:
        return len(self.score)


def topk_select(probs, boxes, k: int) -> Ranked:
    """Top ``k`` (query, category) pairs by probability, descending, ties by flat index."""
    p = np.asarray(getattr(probs, "data", probs), dtype=np.float64)
    b = np.asarray(getattr(boxes, "data", boxes), dtype=np.float64).reshape(-1, 4)
    n, K = p.shape
    if not 0 <= k <= n * K:
        raise ValidationError(f"k={k} exceeds the {n * K} available (query, category) pairs")
    flat = p.reshape(-1)
    idx = np.argsort(-flat, kind="stable")[:k]
    q, c = np.divmod(idx, K)
    return Ranked(q, c, flat[idx], b[q])
