"""Randomized finite-difference cases shared by the unit and acceptance tests.

Each case builds one random configuration from ``seed`` and returns the worst
norm-wise relative error between backprop and central differences.
"""

import numpy as np

from toydetr.autodiff import Parameter, Value, grad_rel_error, numeric_grad
from toydetr.detector import HIGH_ORDER, LINEAR, DetachTape, Detector, ModelConfig, scene_loss
from toydetr.layers import ParamStore
from toydetr.losses import composite_loss, focal_loss, giou_focal_loss, quality_targets, varifocal_loss
from toydetr.matching import Assignment
from toydetr.rank import QueryState, RankParams, add_sine_pe, rank_adaptive_head, rank_and_fuse, sine_pe
from toydetr.scenes import GenConfig, build_dataset

from types import SimpleNamespace

SMALL_GEN = GenConfig(grid=4, feat_dim=8, max_objects=3)


def _worst(fn, params, h):
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        worst = max(worst, grad_rel_error(analytic, numeric_grad(fn, p, h)))
    return worst


def focal_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    z = Parameter(rng.uniform(-3, 3, 8), "z")
    positive = rng.random(8) < 0.5
    gamma = rng.uniform(0.5, 3.0)
    return _worst(lambda: focal_loss(z.sigmoid(), positive, gamma).sum(), [z], 1e-5)


def giou_focal_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    z = Parameter(rng.uniform(-3, 3, 8), "z")
    t = rng.uniform(0.05, 1.0, 8)
    gamma = rng.uniform(0.5, 3.0)
    return _worst(lambda: giou_focal_loss(z.sigmoid(), t, gamma).sum(), [z], 1e-5)


def varifocal_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    z = Parameter(rng.uniform(-3, 3, 8), "z")
    t = rng.uniform(0.05, 1.0, 8)
    return _worst(lambda: varifocal_loss(z.sigmoid(), t).sum(), [z], 1e-5)


def composite_case(seed: int, kind: str) -> float:
    rng = np.random.default_rng(seed)
    n, K, m = 5, 3, int(rng.integers(0, 4))
    z = Parameter(rng.uniform(-2, 2, (n, K)), "z")
    braw = Parameter(rng.uniform(-1.5, 1.5, (n, 4)), "braw")
    gt = SimpleNamespace(boxes=rng.uniform(0.2, 0.8, (m, 4)) * [1, 1, 0.5, 0.5], categories=rng.integers(0, K, m))
    a = Assignment([(g, int(q)) for g, q in enumerate(rng.permutation(n)[:m])])
    # the quality target is a constant of the loss
    t = quality_targets(braw.sigmoid(), gt, a) if kind != "focal" else None

    def fn():
        pred = SimpleNamespace(probs=z.sigmoid(), boxes=braw.sigmoid())
        return composite_loss(pred, gt, a, cls_kind=kind, targets=t)

    return _worst(fn, [z, braw], 1e-6)


def head_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    t = Parameter(rng.normal(0, 2, (4, 3)), "t")
    s = Parameter(rng.normal(0, 2, (4, 3)), "s")
    w = rng.normal(size=(4, 3))
    return _worst(lambda: (rank_adaptive_head(t, s) * w).sum(), [t, s], 1e-5)


def rank_fuse_case(seed: int, variant: str) -> float:
    rng = np.random.default_rng(seed)
    n, d, K = 4, 8, 2
    store = ParamStore()
    params = RankParams(store, rng, n, d, K, 3)
    add_sine_pe(store, rng, "pe", 8, d)
    prev = QueryState(Parameter(rng.normal(size=(n, d)), "content"), Parameter(rng.normal(size=(n, d)), "pos"),
                      Value(rng.normal(size=(n, K))), Value(rng.random((n, K))),
                      Value(rng.uniform(0.1, 0.9, (n, 4))), 1)
    w1, w2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))

    def fn():
        c, p, _, _, _ = rank_and_fuse(prev, params, 2, variant, lambda b: sine_pe(b, store, "pe", 8))
        return (c * w1).sum() + (p * w2).sum()

    checked = [prev.content, params.content(2), store["rank.fuse.2.w"], store["rank.fuse.2.b"]]
    checked.append(prev.positional if variant == "sort" else store["pe.0.w"])
    return _worst(fn, checked, 1e-5)


def sine_pe_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    add_sine_pe(store, rng, "pe", 16, 4)
    boxes = Parameter(rng.uniform(0, 1, (3, 4)), "boxes")
    w = rng.normal(size=(3, 4))
    cycles = float(rng.uniform(0.5, 4.0))
    fn = lambda: (sine_pe(boxes, store, "pe", 16, cycles=cycles) * w).sum()
    return _worst(fn, [boxes, store["pe.0.w"], store["pe.1.w"]], 1e-6)


def _central(f, flat, i, h) -> float:
    orig = flat[i]
    flat[i] = orig + h
    fp = f()
    flat[i] = orig - h
    fm = f()
    flat[i] = orig
    return (fp - fm) / (2 * h)


def kink_aware_difference(f, flat, i, steps=(1e-4, 1e-5, 1e-6)) -> tuple[float, float]:
    """Central difference at the widest step that does not straddle a kink (ReLU, clamp, max).

    On a smooth stretch halving the step changes the estimate by O(h^2); a
    larger change means the step crosses a non-differentiable point, so the
    next narrower step is tried. Returns (estimate, step used).
    """
    for h in steps[:-1]:
        d, d_half = _central(f, flat, i, h), _central(f, flat, i, h / 2)
        if abs(d - d_half) <= 1e-7 + 1e-6 * abs(d):
            return d, h
    return _central(f, flat, i, steps[-1]), steps[-1]


def e2e_case(seed: int, n_tensors: int = 6, n_entries: int = 4, stats: dict | None = None) -> float:
    """Toy detector at d=8, n=4, F=4 with random toggles; sampled weights, detached decisions replayed."""
    rng = np.random.default_rng(seed)
    combo = [bool(x) for x in rng.integers(0, 2, 4)]
    cfg = ModelConfig(layers=3, queries=4, width=8, grid=4, feat_dim=8, pe_width=8,
                      positional_variant=["sort", "recreate"][int(rng.integers(2))],
                      gcl_kind=["giou_focal", "varifocal"][int(rng.integers(2))],
                      seed=int(rng.integers(1000))).with_toggles(*combo)
    model = Detector(cfg)
    for p in model.parameters():
        # move zero-initialised heads and rank parameters off their special points
        p.data += rng.normal(0, 0.05, p.data.shape)
    scene = build_dataset(SMALL_GEN, 1, 0, int(rng.integers(10 ** 6)))[0][0]
    kind = HIGH_ORDER if cfg.hmc else LINEAR
    tape = DetachTape()
    loss, _ = scene_loss(model, scene, kind, tape)
    model.params.zero_grads()
    loss.backward()
    params = model.parameters()

    def loss_at() -> float:
        return scene_loss(model, scene, kind, tape.rewind())[0].item()

    worst = 0.0
    for pi in rng.choice(len(params), size=min(n_tensors, len(params)), replace=False):
        p = params[pi]
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_entries, flat.size), replace=False)
        analytic = (np.zeros_like(p.data) if p.grad is None else p.grad).reshape(-1)[idx]
        for a, i in zip(analytic, idx):
            numeric, h = kink_aware_difference(loss_at, flat, i)
            if stats is not None:
                stats["weights"] = stats.get("weights", 0) + 1
                stats["narrowed"] = stats.get("narrowed", 0) + (h < 1e-4)
            # each sampled weight is judged on its own
            worst = max(worst, grad_rel_error(np.array([a]), np.array([numeric]), floor=1e-6))
    return worst


CASES = {
    "focal": focal_case,
    "giou_focal": giou_focal_case,
    "varifocal": varifocal_case,
    "composite/focal": lambda s: composite_case(s, "focal"),
    "composite/giou_focal": lambda s: composite_case(s, "giou_focal"),
    "composite/varifocal": lambda s: composite_case(s, "varifocal"),
    "rank_head": head_case,
    "rank_and_fuse/sort": lambda s: rank_fuse_case(s, "sort"),
    "rank_and_fuse/recreate": lambda s: rank_fuse_case(s, "recreate"),
    "sine_pe": sine_pe_case,
}
