"""A miniature two-stage DETR-style detector over synthetic feature grids.

Pipeline: feature grid -> one self-attention encoder block -> dense proposal
head over every cell -> top-n proposals seed the positional queries -> L
decoder layers (self-attention, cross-attention to the encoder cells, FFN) with
shared classification / box heads after each layer. The rank-oriented
mechanisms plug in between and after decoder layers and are toggled in
:class:`ModelConfig`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Value
from .errors import ContractError, NumericalAbort, ValidationError
from .geometry import pairwise_iou_giou
from .layers import ParamStore, add_attention, add_norm, attention, inverse_sigmoid, linear, mlp2, norm
from .losses import LOSS_KINDS, TARGET_KINDS, LossWeights, composite_loss, quality_targets
from .matching import HIGH_ORDER, HIGH_ORDER_BASES, LINEAR, MatcherSchedule, match, select_matcher
from .rank import (
    RECREATE_POSITIONAL,
    SORT_POSITIONAL,
    VARIANTS,
    QueryState,
    RankParams,
    add_sine_pe,
    rank_adaptive_head,
    rank_and_fuse,
    ranking_basis,
    sine_pe,
    topk_select,
)
from .scenes import Scene, cell_centers

log = logging.getLogger(__name__)

PRIOR_PROB = 0.01


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 3
    queries: int = 30
    width: int = 32
    categories: int = 3
    grid: int = 8
    feat_dim: int = 32
    pe_width: int = 64
    pe_temperature: float = 10000.0
    pe_cycles: float = 4.0
    stem_radius: int = 1
    # mechanism toggles
    rch: bool = False
    qrl: bool = False
    gcl: bool = False
    hmc: bool = False
    positional_variant: str = SORT_POSITIONAL
    gcl_kind: str = "giou_focal"
    target_kind: str = "norm_giou_pow"
    target_power: float = 1.0
    alpha: float = 4.0
    high_order_base: str = "iou"
    switch_fraction: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    # optimizer
    lr: float = 1.0
    steps: int = 8000
    batch_size: int = 1
    clip_norm: float = 0.1
    lr_drop_fraction: float = 0.75
    lr_drop_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.qrl and self.layers < 2:
            raise ValidationError("the query rank layer needs at least two decoder layers")
        if self.stem_radius < 0:
            raise ValidationError("stem_radius must be non-negative")
        if self.queries > self.grid * self.grid:
            raise ValidationError(f"{self.queries} queries exceed the {self.grid ** 2} proposal cells")
        if self.positional_variant not in VARIANTS:
            raise ValidationError(f"positional_variant must be one of {VARIANTS}")
        if self.gcl_kind not in LOSS_KINDS[1:]:
            raise ValidationError(f"gcl_kind must be one of {LOSS_KINDS[1:]}")
        if self.target_kind not in TARGET_KINDS:
            raise ValidationError(f"target_kind must be one of {TARGET_KINDS}")
        if self.high_order_base not in HIGH_ORDER_BASES:
            raise ValidationError(f"high_order_base must be one of {HIGH_ORDER_BASES}")
        if not self.alpha > 0:
            raise ValidationError("alpha must be positive")
        MatcherSchedule(self.switch_fraction)

    @property
    def cls_kind(self) -> str:
        return self.gcl_kind if self.gcl else "focal"

    @property
    def schedule(self) -> MatcherSchedule:
        return MatcherSchedule(self.switch_fraction)

    def toggles(self) -> tuple[bool, bool, bool, bool]:
        return (self.rch, self.qrl, self.gcl, self.hmc)

    def with_toggles(self, rch: bool, qrl: bool, gcl: bool, hmc: bool) -> "ModelConfig":
        return replace(self, rch=rch, qrl=qrl, gcl=gcl, hmc=hmc)


@dataclass
class DetachTape:
    """Detached decisions of one forward/loss pass, recorded once and replayed after.

    Covers the proposal top-k boxes, every layer's reference boxes and rank
    permutation, the matcher assignments, and quality-aware targets. Replaying
    them makes the loss a smooth function of the weights around the recorded
    point, which is what finite-difference checks need.
    """

    entries: list = field(default_factory=list)
    cursor: int = 0

    def take(self, compute):
        if self.cursor < len(self.entries):
            value = self.entries[self.cursor]
        else:
            value = compute()
            self.entries.append(value)
        self.cursor += 1
        return value

    def rewind(self) -> "DetachTape":
        self.cursor = 0
        return self


def _taker(tape: DetachTape | None):
    return tape.take if tape is not None else (lambda compute: compute())


def neighborhood_stem(features: np.ndarray, grid: int, radius: int) -> np.ndarray:
    """Fixed backbone analog: each cell sees its zero-padded (2r+1)^2 neighborhood.

    Returns (F*F, (2r+1)^2 * d), neighbors ordered row-major by (dy, dx).
    """
    d = features.shape[1]
    g = np.pad(features.reshape(grid, grid, d), ((radius, radius), (radius, radius), (0, 0)))
    k = 2 * radius + 1
    parts = [g[dy:dy + grid, dx:dx + grid] for dy in range(k) for dx in range(k)]
    return np.concatenate(parts, axis=2).reshape(grid * grid, k * k * d)


class Detector:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        d, K, n, L = cfg.width, cfg.categories, cfg.queries, cfg.layers
        rng = np.random.default_rng(cfg.seed)
        s = self.params = ParamStore()
        prior = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)

        s.linear(rng, "enc.in", cfg.feat_dim * (2 * cfg.stem_radius + 1) ** 2, d)
        add_sine_pe(s, rng, "pe.cell", cfg.pe_width, d)
        add_attention(s, rng, "enc.attn", d)
        add_norm(s, "enc.n1", d)
        s.linear(rng, "enc.ffn.0", d, 2 * d)
        s.linear(rng, "enc.ffn.1", 2 * d, d)
        add_norm(s, "enc.n2", d)

        s.linear(rng, "prop.cls", d, K)
        s["prop.cls.b"].data[...] = prior
        s.linear(rng, "prop.box.0", d, d)
        s.linear(rng, "prop.box.1", d, 4)
        s["prop.box.1.w"].data[...] = 0.0

        s.add("query.content", rng.normal(0.0, 1.0, size=(n, d)))
        add_sine_pe(s, rng, "pe.query", cfg.pe_width, d)
        for layer in range(1, L + 1):
            add_attention(s, rng, f"dec.{layer}.self", d)
            add_norm(s, f"dec.{layer}.n1", d)
            add_attention(s, rng, f"dec.{layer}.cross", d)
            add_norm(s, f"dec.{layer}.n2", d)
            s.linear(rng, f"dec.{layer}.ffn.0", d, 2 * d)
            s.linear(rng, f"dec.{layer}.ffn.1", 2 * d, d)
            add_norm(s, f"dec.{layer}.n3", d)

        s.linear(rng, "head.cls", d, K)
        s["head.cls.b"].data[...] = prior
        s.linear(rng, "head.box.0", d, d)
        s.linear(rng, "head.box.1", d, 4)
        s["head.box.1.w"].data[...] = 0.0

        # separate stream so base weights do not depend on the toggles
        self.rank = None
        if cfg.rch or cfg.qrl:
            self.rank = RankParams(s, np.random.default_rng([cfg.seed, 7]), n, d, K, L)

        centers = cell_centers(cfg.grid)
        self._cell_boxes = np.column_stack([centers, np.full((len(centers), 2), 1.0 / cfg.grid)])
        self._cell_ref = np.column_stack([centers, np.full((len(centers), 2), 2.0 / cfg.grid)])

    # -- forward ------------------------------------------------------------------
    def query_pe(self, boxes) -> Value:
        return sine_pe(boxes, self.params, "pe.query", self.cfg.pe_width, self.cfg.pe_temperature,
                       self.cfg.pe_cycles)

    def encode(self, scene: Scene) -> tuple[Value, Value, QueryState]:
        cfg, s = self.cfg, self.params
        if scene.features.shape != (cfg.grid * cfg.grid, cfg.feat_dim):
            raise ContractError(
                f"scene {scene.id} features {scene.features.shape} do not fit grid {cfg.grid} / dim {cfg.feat_dim}"
            )
        cell_pos = sine_pe(self._cell_boxes, s, "pe.cell", cfg.pe_width, cfg.pe_temperature, cfg.pe_cycles)
        h = linear(Value(neighborhood_stem(scene.features, cfg.grid, cfg.stem_radius)), s, "enc.in")
        q = h + cell_pos
        h = norm(h + attention(q, q, h, s, "enc.attn"), s, "enc.n1")
        memory = norm(h + mlp2(h, s, "enc.ffn"), s, "enc.n2")

        logits = linear(memory, s, "prop.cls")
        boxes = (Value(inverse_sigmoid(self._cell_ref)) + mlp2(memory, s, "prop.box")).sigmoid()
        proposals = QueryState(memory, cell_pos, logits, logits.sigmoid(), boxes, 0,
                               self._cell_ref, np.arange(len(self._cell_ref)))
        return memory, cell_pos, proposals

    def _decoder_layer(self, layer: int, content: Value, pos: Value, ref: np.ndarray,
                       memory: Value, mem_pos: Value, order: np.ndarray) -> QueryState:
        s = self.params
        q = content + pos
        content = norm(content + attention(q, q, content, s, f"dec.{layer}.self"), s, f"dec.{layer}.n1")
        content = norm(content + attention(content + pos, memory + mem_pos, memory, s, f"dec.{layer}.cross"),
                       s, f"dec.{layer}.n2")
        content = norm(content + mlp2(content, s, f"dec.{layer}.ffn"), s, f"dec.{layer}.n3")
        logits = linear(content, s, "head.cls")
        bias = self.rank.bias(layer) if self.cfg.rch else None
        probs = rank_adaptive_head(logits, bias)
        boxes = (Value(inverse_sigmoid(ref)) + mlp2(content, s, "head.box")).sigmoid()
        return QueryState(content, pos, logits, probs, boxes, layer, ref, order)

    def forward(self, scene: Scene, return_proposals: bool = False, tape: DetachTape | None = None):
        """Run the detector; returns one :class:`QueryState` per decoder layer."""
        cfg = self.cfg
        take = _taker(tape)
        memory, mem_pos, proposals = self.encode(scene)
        ref = take(lambda: topk_select(proposals.probs.data.max(axis=1, keepdims=True), proposals.boxes.data,
                                       cfg.queries).boxes.copy())
        order = np.arange(cfg.queries)
        content = self.params["query.content"]
        pos = self.query_pe(ref)

        states: list[QueryState] = []
        for layer in range(1, cfg.layers + 1):
            if layer >= 2:
                prev = states[-1]
                boxes = take(lambda: prev.boxes.data.copy())
                if cfg.qrl:
                    perm = take(lambda: ranking_basis(prev.probs)[1])
                    content, pos, ref, order, _ = rank_and_fuse(
                        prev, self.rank, layer, cfg.positional_variant, self.query_pe, perm, boxes)
                else:
                    content, ref, order = prev.content, boxes, prev.order
                    pos = prev.positional if cfg.positional_variant == SORT_POSITIONAL else self.query_pe(ref)
            states.append(self._decoder_layer(layer, content, pos, ref, memory, mem_pos, order))
        return (states, proposals) if return_proposals else states

    def parameters(self):
        return list(self.params)


# -- training -----------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    scene_id: str
    loss: float
    matched_iou: float
    matcher: str


def scene_loss(model: Detector, scene: Scene, matcher_kind: str, tape: DetachTape | None = None) -> tuple[Value, float]:
    """Summed per-layer losses plus the proposal loss; also the final-layer matched IoU."""
    cfg = model.cfg
    take = _taker(tape)
    states, proposals = model.forward(scene, return_proposals=True, tape=tape)
    for st in [proposals] + states:
        if not (np.isfinite(st.probs.data).all() and np.isfinite(st.boxes.data).all()):
            raise NumericalAbort(f"non-finite outputs at layer {st.layer_index} on scene {scene.id}", scene.id)
    total = Value(0.0)
    matched_iou = float("nan")
    for st in states:
        a = take(lambda: match(st, scene, matcher_kind, cfg.weights, cfg.alpha, cfg.high_order_base))
        targets = None
        if cfg.cls_kind != "focal":
            targets = take(lambda: quality_targets(st.boxes, scene, a, cfg.target_kind, cfg.target_power))
        total = total + composite_loss(st, scene, a, cfg.weights, cfg.cls_kind, cfg.target_kind, cfg.target_power,
                                       targets)
        if st.layer_index == cfg.layers and a.pairs:
            g = np.array([p[0] for p in a.pairs])
            q = np.array([p[1] for p in a.pairs])
            ious, _ = pairwise_iou_giou(scene.boxes[g], st.boxes.data[q])
            matched_iou = float(np.mean(np.diag(ious)))
    a0 = take(lambda: match(proposals, scene, LINEAR, cfg.weights))
    total = total + composite_loss(proposals, scene, a0, cfg.weights, "focal")
    return total, matched_iou


def clip_and_step(params, lr: float, clip_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm_sq = sum(float((g * g).sum()) for g in grads)
    gnorm = math.sqrt(norm_sq)
    scale = min(1.0, clip_norm / gnorm) if gnorm > 0 else 1.0
    for p in params:
        if p.grad is not None:
            p.data -= lr * scale * p.grad
            p.grad = None
    return gnorm


def learning_rate(step: int, cfg: ModelConfig) -> float:
    """Constant rate, multiplied by ``lr_drop_factor`` from ``lr_drop_fraction`` of training on."""
    return cfg.lr * (cfg.lr_drop_factor if step >= cfg.lr_drop_fraction * cfg.steps else 1.0)


def train(model: Detector, dataset: list[Scene], cfg: ModelConfig | None = None,
          progress_every: int = 0) -> tuple[Detector, list[StepRecord]]:
    """Gradient-descent training with per-layer Hungarian matching.

    One optimizer step per ``batch_size`` scenes; scenes are visited in a
    seeded shuffled order, reshuffled every epoch.
    """
    cfg = cfg or model.cfg
    if not dataset:
        raise ContractError("training needs a nonempty dataset")
    rng = np.random.default_rng([cfg.seed, 11])
    params = model.parameters()
    records: list[StepRecord] = []
    order = rng.permutation(len(dataset))
    cursor = 0
    for step in range(cfg.steps):
        kind = select_matcher(step, cfg.steps, cfg.schedule) if cfg.hmc else LINEAR
        losses, ious = [], []
        for _ in range(cfg.batch_size):
            if cursor == len(order):
                order = rng.permutation(len(dataset))
                cursor = 0
            scene = dataset[order[cursor]]
            cursor += 1
            try:
                loss, miou = scene_loss(model, scene, kind)
            except NumericalAbort as exc:
                raise NumericalAbort(f"{exc} (step {step})", scene.id, step) from exc
            if not np.isfinite(loss.item()):
                raise NumericalAbort(f"non-finite loss at step {step} on scene {scene.id}", scene.id, step)
            (loss * (1.0 / cfg.batch_size)).backward()
            losses.append(loss.item())
            ious.append(miou)
        clip_and_step(params, learning_rate(step, cfg), cfg.clip_norm)
        ious = [x for x in ious if np.isfinite(x)]
        records.append(StepRecord(step, scene.id, float(np.mean(losses)),
                                  float(np.mean(ious)) if ious else float("nan"), kind))
        if progress_every and step % progress_every == 0:
            log.info("step %d loss %.4f matcher %s", step, records[-1].loss, kind)
    return model, records


def final_matcher(cfg: ModelConfig) -> str:
    """Matcher active at the last training step."""
    return select_matcher(max(cfg.steps - 1, 0), max(cfg.steps, 1), cfg.schedule) if cfg.hmc else LINEAR


# -- inference ----------------------------------------------------------------------

@dataclass
class Detection:
    scene_id: str
    box: np.ndarray
    category: int
    score: float


def default_k(cfg: ModelConfig, k: int = 100) -> int:
    return min(k, cfg.queries * cfg.categories)


def infer(model: Detector, scene: Scene, k: int | None = None) -> list[Detection]:
    """Top-``k`` detections of the final layer (default: 100, capped at n*K)."""
    k = default_k(model.cfg) if k is None else k
    final = model.forward(scene)[-1]
    top = topk_select(final.probs, final.boxes, k)
    return [Detection(scene.id, b, int(c), float(p)) for b, c, p in zip(top.boxes, top.category, top.score)]


__all__ = [
    "ModelConfig",
    "Detector",
    "DetachTape",
    "StepRecord",
    "Detection",
    "scene_loss",
    "train",
    "infer",
    "final_matcher",
    "HIGH_ORDER",
    "LINEAR",
    "RECREATE_POSITIONAL",
    "SORT_POSITIONAL",
]
